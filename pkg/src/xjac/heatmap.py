"""Dependency-free SVG rendering of token-token attribution matrices."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

CELL = 36
FONT = 12

# blue (negative) -> white (zero) -> red (positive)
NEG = (33, 102, 172)
POS = (178, 24, 43)


def diverging_color(value: float, limit: float) -> str:
    """Hex color for ``value`` on a palette symmetric about zero."""
    if limit <= 0:
        return "#ffffff"
    t = max(-1.0, min(1.0, value / limit))
    end = POS if t > 0 else NEG
    rgb = [round(255 + abs(t) * (c - 255)) for c in end]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap_svg(matrix, tokens_a, tokens_b, title: str = "") -> str:
    """Rows are tokens of ``a``, columns tokens of ``b``; cell text shows the value."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    if rows != len(tokens_a) or cols != len(tokens_b):
        raise ValueError(f"matrix {m.shape} does not match {len(tokens_a)} x {len(tokens_b)} tokens")
    limit = float(np.abs(m).max()) if m.size else 0.0
    label_w = FONT * max([len(t) for t in tokens_a] + [4]) * 0.62 + 10
    label_h = FONT * max([len(t) for t in tokens_b] + [4]) * 0.62 + 10
    top = label_h + (2 * FONT if title else FONT)
    width = int(label_w + cols * CELL + 10)
    height = int(top + rows * CELL + 10)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="{FONT}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="{FONT + 2}" text-anchor="middle">{escape(title)}</text>')
    for j, tok in enumerate(tokens_b):
        x = label_w + (j + 0.5) * CELL
        out.append(f'<text x="{x:.1f}" y="{top - 4:.1f}" transform="rotate(-60 {x:.1f} {top - 4:.1f})">'
                   f'{escape(tok)}</text>')
    for i, tok in enumerate(tokens_a):
        y = top + (i + 0.5) * CELL + FONT / 3
        out.append(f'<text x="{label_w - 4:.1f}" y="{y:.1f}" text-anchor="end">{escape(tok)}</text>')
        for j in range(cols):
            v = m[i, j]
            x0, y0 = label_w + j * CELL, top + i * CELL
            ink = "#ffffff" if limit and abs(v) > 0.6 * limit else "#000000"
            out.append(f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{CELL}" height="{CELL}" '
                       f'fill="{diverging_color(v, limit)}" stroke="#dddddd"><title>{v:.6g}</title></rect>')
            out.append(f'<text x="{x0 + CELL / 2:.1f}" y="{y0 + CELL / 2 + FONT / 3:.1f}" text-anchor="middle" '
                       f'font-size="{FONT - 3}" fill="{ink}">{v:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
