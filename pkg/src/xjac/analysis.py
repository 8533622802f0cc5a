"""Aggregate statistics over attribution outputs: histograms, cumulative
prediction curves, word merging and part-of-speech relations."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from xjac.attribution import AttributionOutput, total
from xjac.errors import DataError

Span = tuple[int, int]


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray
    negative_fraction: float
    cells: int


def attribution_histogram(outputs: Sequence[AttributionOutput], layer: int | None = None,
                          bins: int | Sequence[float] = 50) -> Histogram:
    """Histogram of every token-token cell; ``layer=None`` pools all layers."""
    chosen = [o for o in outputs if layer is None or o.layer == layer]
    if not chosen:
        raise DataError(f"no attribution outputs for layer {layer}")
    values = np.concatenate([np.asarray(o.matrix, dtype=np.float64).ravel() for o in chosen])
    counts, edges = np.histogram(values, bins=bins)
    return Histogram(counts, edges, float(np.count_nonzero(values < 0)) / values.size, int(values.size))


def _abs_order(matrix: np.ndarray) -> np.ndarray:
    """Row-major flat indices sorted by |value| descending, ties by (row, column)."""
    flat = np.asarray(matrix, dtype=np.float64).ravel()
    return np.lexsort((np.arange(flat.size), -np.abs(flat)))


def example_curve(output: AttributionOutput, grid: np.ndarray) -> np.ndarray:
    """Cumulative share of the score on ``grid`` (fractions of cells, 0..1).

    Between cell counts the curve is linearly interpolated, so equal cells
    trace the diagonal exactly. The last point is ``attribution_sum / score``.
    """
    flat = np.asarray(output.matrix, dtype=np.float64).ravel()
    cum = np.concatenate([[0.0], np.cumsum(flat[_abs_order(output.matrix)])]) / output.score
    # pin the endpoint to the correctly rounded sum so it matches attribution_sum
    cum[-1] = total(output.matrix) / output.score
    positions = np.arange(flat.size + 1) / flat.size
    return np.interp(grid, positions, cum)


@dataclass
class CumulativeCurve:
    fractions: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    curves: np.ndarray
    excluded: int

    @property
    def endpoints(self) -> np.ndarray:
        return self.curves[:, -1]


def cumulative_prediction_curve(outputs: Sequence[AttributionOutput], points: int = 101) -> CumulativeCurve:
    """Mean and standard deviation of per-example cumulative curves on a percent grid.

    Examples with a zero score are skipped and counted in ``excluded``.
    """
    grid = np.linspace(0.0, 1.0, points)
    kept = [o for o in outputs if o.score != 0]
    if not kept:
        raise DataError("no attribution outputs with a nonzero score")
    curves = np.stack([example_curve(o, grid) for o in kept])
    return CumulativeCurve(grid, curves.mean(axis=0), curves.std(axis=0), curves, len(outputs) - len(kept))


def _check_partition(spans: Sequence[Span], n: int, axis: str) -> None:
    pos = 0
    for start, end in spans:
        if start != pos or end <= start:
            raise DataError(f"{axis} spans must partition 0..{n} without gaps or overlaps, got {list(spans)}")
        pos = end
    if pos != n:
        raise DataError(f"{axis} spans cover 0..{pos}, expected 0..{n}")


def merge_tokens_to_words(matrix, spans_a: Sequence[Span], spans_b: Sequence[Span]) -> np.ndarray:
    """Average each token block into one word-word cell."""
    m = np.asarray(matrix, dtype=np.float64)
    _check_partition(spans_a, m.shape[0], "row")
    _check_partition(spans_b, m.shape[1], "column")
    out = np.empty((len(spans_a), len(spans_b)))
    for i, (r0, r1) in enumerate(spans_a):
        for j, (c0, c1) in enumerate(spans_b):
            out[i, j] = m[r0:r1, c0:c1].mean()
    return out


def align_words(tokens: Sequence[str], words: Sequence[str]) -> list[Span]:
    """Map each word to the run of tokens whose concatenation spells it (case-insensitive)."""
    spans, pos = [], 0
    for word in words:
        target, built, start = word.lower(), "", pos
        while pos < len(tokens) and len(built) < len(target):
            built += tokens[pos].lower()
            pos += 1
        if built != target:
            raise DataError(f"cannot align word {word!r} to tokens {list(tokens[start:pos])}")
        spans.append((start, pos))
    if pos != len(tokens):
        raise DataError(f"tokens {list(tokens[pos:])} left over after aligning {list(words)}")
    return spans


@dataclass
class TaggedSentence:
    words: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.words) != len(self.tags):
            raise DataError("words and tags differ in length")


def load_tags(path) -> list[TaggedSentence]:
    """Read ``word<TAB>tag`` lines; blank lines separate sentences."""
    sentences, words, tags = [], [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            if words:
                sentences.append(TaggedSentence(words, tags))
                words, tags = [], []
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0] or not fields[1]:
            raise DataError(f"{path}:{lineno}: expected 'word<TAB>tag'")
        words.append(fields[0])
        tags.append(fields[1].strip())
    if words:
        sentences.append(TaggedSentence(words, tags))
    if not sentences:
        raise DataError(f"{path}: no tagged sentences")
    return sentences


def tag_index(sentences: Iterable[TaggedSentence]) -> dict[tuple[str, ...], TaggedSentence]:
    return {tuple(w.lower() for w in s.words): s for s in sentences}


@dataclass
class WordAttribution:
    """Word-level view of one output: block means plus the block sizes needed
    to turn means back into sums."""

    matrix: np.ndarray
    sizes_a: np.ndarray
    sizes_b: np.ndarray
    tags_a: list[str]
    tags_b: list[str]
    score: float

    @property
    def block_sums(self) -> np.ndarray:
        return self.matrix * np.outer(self.sizes_a, self.sizes_b)


def to_word_level(output: AttributionOutput, tagged_a: TaggedSentence, tagged_b: TaggedSentence) -> WordAttribution:
    spans_a = align_words(output.tokens_a, tagged_a.words)
    spans_b = align_words(output.tokens_b, tagged_b.words)
    return WordAttribution(
        merge_tokens_to_words(output.matrix, spans_a, spans_b),
        np.array([e - s for s, e in spans_a], dtype=np.float64),
        np.array([e - s for s, e in spans_b], dtype=np.float64),
        list(tagged_a.tags), list(tagged_b.tags), output.score,
    )


def word_level_from_index(output: AttributionOutput, index: dict) -> WordAttribution:
    sides = []
    for tokens in (output.tokens_a, output.tokens_b):
        key = tuple(t.lower() for t in tokens)
        if key not in index:
            raise DataError(f"missing tags for sentence {' '.join(tokens)!r}")
        sides.append(index[key])
    return to_word_level(output, *sides)


def relation(tag_a: str, tag_b: str) -> str:
    """Unordered tag pair, e.g. ``NN-VB``."""
    return "-".join(sorted((tag_a, tag_b)))


def pos_relation_shares(words: Sequence[WordAttribution], top_fractions: Sequence[float] = (0.1, 0.25, 0.5)
                        ) -> dict[float, list[tuple[str, float, int]]]:
    """Share of each POS relation among the highest-valued word-word cells.

    For each fraction ``f`` the top ``ceil(f * cells)`` cells across the whole
    corpus are taken by signed value (ties by example, row, column). Returns
    ``{f: [(relation, share, count), ...]}`` sorted by share descending.
    """
    values, rels = [], []
    for w in words:
        if len(w.tags_a) != w.matrix.shape[0] or len(w.tags_b) != w.matrix.shape[1]:
            raise DataError("tags do not cover every word")
        for i, ta in enumerate(w.tags_a):
            for j, tb in enumerate(w.tags_b):
                values.append(w.matrix[i, j])
                rels.append(relation(ta, tb))
    if not values:
        raise DataError("no word-level attributions")
    values = np.asarray(values)
    order = np.lexsort((np.arange(values.size), -values))
    table = {}
    for f in top_fractions:
        if not 0 < f <= 1:
            raise DataError(f"top fraction {f} outside (0, 1]")
        k = max(1, math.ceil(f * values.size))
        counts: dict[str, int] = {}
        for idx in order[:k]:
            counts[rels[idx]] = counts.get(rels[idx], 0) + 1
        table[f] = sorted(((r, c / k, c) for r, c in counts.items()), key=lambda t: (-t[2], t[0]))
    return table


def pos_restricted_prediction(word: WordAttribution, relations: Iterable[str]) -> float:
    """Fraction of the score carried by word pairs whose relation is in ``relations``."""
    if word.score == 0:
        raise DataError("restricted prediction undefined for a zero score")
    wanted = {relation(*r.split("-", 1)) for r in relations}
    sums = word.block_sums
    picked = [sums[i, j] for i, ta in enumerate(word.tags_a) for j, tb in enumerate(word.tags_b)
              if relation(ta, tb) in wanted]
    return math.fsum(picked) / word.score
