"""Integrated Jacobians and feature-pair attributions for Siamese encoders.

For a Siamese score ``f(a, b) = e(a) . e(b)`` and references ``r_a``, ``r_b``:

    A_ij = (a - r_a)_i (J_a^T J_b)_ij (b - r_b)_j

where ``J_a`` is the Jacobian of ``e`` averaged along the straight path from
``r_a`` to ``a``. The sum of ``A`` equals
``f(a,b) - f(a,r_b) - f(r_a,b) + f(r_a,r_b)`` up to quadrature error; with
shifted embeddings (``e(r) = 0``) the last three terms vanish and the sum
equals the score itself.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from xjac.autodiff import batched_jacobian, batched_score_gradient, batched_token_jvp
from xjac.encoder import SiameseEncoder, TokenSequence, reference_for
from xjac.errors import DataError, NumericalError, UsageError

SCHEMES = ("midpoint", "left", "trapezoid")
DEFAULT_BATCH = 16
THREADS_ENV = "XJAC_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Worker threads for path evaluation, capped by $XJAC_THREADS when set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class PathSpec:
    reference: torch.Tensor
    target: torch.Tensor
    steps: int
    scheme: str = "midpoint"

    def __post_init__(self):
        if self.reference.shape != self.target.shape:
            raise DataError(f"reference shape {tuple(self.reference.shape)} != input shape {tuple(self.target.shape)}")
        if self.scheme not in SCHEMES:
            raise UsageError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.steps < 1:
            raise UsageError("steps must be >= 1")
        if self.scheme == "trapezoid" and self.steps < 2:
            raise UsageError("trapezoid scheme needs at least 2 steps")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes alpha_n and weights w_n on [0, 1], n = 1..N."""
        n = np.arange(1, self.steps + 1, dtype=np.float64)
        if self.scheme == "midpoint":
            return (n - 0.5) / self.steps, np.full(self.steps, 1.0 / self.steps)
        if self.scheme == "left":
            return (n - 1) / self.steps, np.full(self.steps, 1.0 / self.steps)
        h = 1.0 / (self.steps - 1)
        w = np.full(self.steps, h)
        w[0] = w[-1] = h / 2
        return (n - 1) * h, w

    @property
    def delta(self) -> torch.Tensor:
        return self.target - self.reference


def interpolation_point(path: PathSpec, n: int) -> torch.Tensor:
    """The n-th point (1-based) on the straight path from reference to target."""
    if not 1 <= n <= path.steps:
        raise UsageError(f"step {n} outside 1..{path.steps}")
    alpha = float(path.nodes()[0][n - 1])
    if alpha == 0.0:
        return path.reference.clone()
    return path.reference + alpha * path.delta


def _path_points(path: PathSpec, alphas: np.ndarray) -> torch.Tensor:
    a = torch.as_tensor(alphas, dtype=path.reference.dtype).reshape(-1, *([1] * path.reference.dim()))
    return path.reference + a * path.delta


def _path_sum(evaluate, path: PathSpec, batch_size: int, workers: int | None) -> torch.Tensor:
    """Weighted sum over quadrature nodes of ``evaluate(points) -> (B, ...)``.

    Nodes are processed in chunks of ``batch_size``; chunks may run on
    ``workers`` threads. Chunk partial sums are always added in chunk order,
    so the result does not depend on the number of workers.
    """
    if batch_size < 1:
        raise UsageError("batch size must be >= 1")
    alphas, weights = path.nodes()
    chunks = [slice(i, i + batch_size) for i in range(0, path.steps, batch_size)]

    def run(sl):
        w = torch.as_tensor(weights[sl], dtype=path.reference.dtype)
        # function transforms still differentiate w.r.t. their inputs under no_grad;
        # this only stops graphs through the model parameters from piling up
        with torch.no_grad():
            values = evaluate(_path_points(path, alphas[sl]))
            return (w.reshape(-1, *([1] * (values.dim() - 1))) * values).sum(dim=0)

    nworkers = min(worker_count(workers), len(chunks))
    if nworkers > 1:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            partials = list(pool.map(run, chunks))
    else:
        partials = [run(sl) for sl in chunks]
    acc = partials[0]
    for p in partials[1:]:
        acc = acc + p
    if not torch.isfinite(acc).all():
        raise NumericalError("non-finite values along the integration path")
    return acc


def integrated_jacobian(tail, path: PathSpec, batch_size: int = DEFAULT_BATCH,
                        workers: int | None = 1) -> torch.Tensor:
    """Quadrature estimate of the path-averaged Jacobian, shape (E, S*D)."""
    return _path_sum(lambda pts: batched_jacobian(tail, pts), path, batch_size, workers)


def integrated_token_projection(tail, path: PathSpec, batch_size: int = DEFAULT_BATCH,
                                workers: int | None = 1) -> torch.Tensor:
    """Integrated Jacobian contracted with the path direction per token, shape (E, S).

    Column ``s`` equals ``J[:, s*D:(s+1)*D] @ (x - r)[s]``, computed with one
    forward-mode product per token instead of a full Jacobian; cheaper whenever
    S < E.
    """
    delta = path.delta
    s = delta.shape[0]
    tangents = torch.zeros(s, *delta.shape, dtype=delta.dtype)
    idx = torch.arange(s)
    tangents[idx, idx] = delta

    def evaluate(pts):
        proj = batched_token_jvp(tail, pts, tangents)  # (B, S, E)
        return proj.transpose(1, 2)

    return _path_sum(evaluate, path, batch_size, workers)


def attribution_matrix(jac_a: torch.Tensor, jac_b: torch.Tensor, a: torch.Tensor, r_a: torch.Tensor,
                       b: torch.Tensor, r_b: torch.Tensor) -> torch.Tensor:
    """Full feature-pair matrix, shape (S_a*D, S_b*D)."""
    da, db = (a - r_a).reshape(-1), (b - r_b).reshape(-1)
    if jac_a.shape[1] != da.numel() or jac_b.shape[1] != db.numel() or jac_a.shape[0] != jac_b.shape[0]:
        raise DataError(
            f"shape mismatch: J_a {tuple(jac_a.shape)}, J_b {tuple(jac_b.shape)}, "
            f"inputs {da.numel()} and {db.numel()}"
        )
    return da[:, None] * (jac_a.T @ jac_b) * db[None, :]


def reduce_token_token(full: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum each D x D block of the full matrix, giving (S_a, S_b)."""
    rows, cols = full.shape
    if rows % dim or cols % dim:
        raise DataError(f"matrix shape {tuple(full.shape)} not divisible by embedding width {dim}")
    return full.reshape(rows // dim, dim, cols // dim, dim).sum(dim=(1, 3))


def token_token_from_jacobians(jac_a: torch.Tensor, jac_b: torch.Tensor, a: torch.Tensor, r_a: torch.Tensor,
                               b: torch.Tensor, r_b: torch.Tensor) -> torch.Tensor:
    """Token-token matrix without materializing the full matrix.

    Contracts each side over its embedding axis first: P_a[k, s] =
    sum_d J_a[k, (s, d)] (a - r_a)[s, d], then returns P_a^T P_b.
    """
    e = jac_a.shape[0]
    pa = (jac_a.reshape(e, *a.shape) * (a - r_a)).sum(dim=-1)
    pb = (jac_b.reshape(e, *b.shape) * (b - r_b)).sum(dim=-1)
    return pa.T @ pb


def total(matrix) -> float:
    """Row-major, correctly rounded sum of a matrix."""
    return math.fsum(np.asarray(matrix, dtype=np.float64).ravel().tolist())


@dataclass
class AttributionOutput:
    tokens_a: list[str]
    tokens_b: list[str]
    layer: int
    steps: int
    scheme: str
    score: float
    attribution_sum: float
    matrix: np.ndarray
    full: np.ndarray | None = field(default=None, repr=False)

    @property
    def error(self) -> float:
        return abs(self.score - self.attribution_sum)

    @property
    def relative_error(self) -> float:
        return self.error / abs(self.score) if self.score else math.inf if self.error else 0.0

    def to_json(self) -> dict:
        return {
            "tokens_a": list(self.tokens_a),
            "tokens_b": list(self.tokens_b),
            "layer": self.layer,
            "steps": self.steps,
            "scheme": self.scheme,
            "score": self.score,
            "attribution_sum": self.attribution_sum,
            "error": self.error,
            "matrix": np.asarray(self.matrix, dtype=np.float64).tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "AttributionOutput":
        try:
            matrix = np.asarray(data["matrix"], dtype=np.float64)
            out = cls(list(data["tokens_a"]), list(data["tokens_b"]), int(data["layer"]), int(data["steps"]),
                      str(data["scheme"]), float(data["score"]), float(data["attribution_sum"]), matrix)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed attribution record: {exc}") from exc
        if matrix.shape != (len(out.tokens_a), len(out.tokens_b)):
            raise DataError(f"matrix shape {matrix.shape} does not match token counts")
        return out


def attribute_representations(tail, a: torch.Tensor, r_a: torch.Tensor, b: torch.Tensor, r_b: torch.Tensor,
                              steps: int, scheme: str = "midpoint", full: bool = False,
                              batch_size: int = DEFAULT_BATCH, workers: int | None = 1):
    """Token-token matrix (and optionally the full matrix) for arbitrary tails.

    Returns ``(token_matrix, full_matrix_or_None)``. Without ``full`` only the
    per-token projections of the integrated Jacobians are formed.
    """
    path_a, path_b = PathSpec(r_a, a, steps, scheme), PathSpec(r_b, b, steps, scheme)
    if full:
        jac_a = integrated_jacobian(tail, path_a, batch_size, workers)
        jac_b = integrated_jacobian(tail, path_b, batch_size, workers)
        big = attribution_matrix(jac_a, jac_b, a, r_a, b, r_b)
        return reduce_token_token(big, a.shape[-1]), big
    pa = integrated_token_projection(tail, path_a, batch_size, workers)
    pb = integrated_token_projection(tail, path_b, batch_size, workers)
    return pa.T @ pb, None


def _require_adjusted(model: SiameseEncoder) -> None:
    if not model.config.adjusted:
        raise UsageError("attribution needs a model with shifted (adjusted) dot-product scoring")


def attribute(model: SiameseEncoder, a_seq: TokenSequence, b_seq: TokenSequence, layer: int,
              steps: int = 500, scheme: str = "midpoint", full: bool = False,
              batch_size: int = DEFAULT_BATCH, workers: int | None = 1) -> AttributionOutput:
    """Attribute the shifted dot-product score of ``(a, b)`` to token pairs at ``layer``."""
    _require_adjusted(model)
    with torch.no_grad():
        a = model.encode_prefix(a_seq, layer)
        r_a = model.encode_prefix(reference_for(a_seq), layer)
        b = model.encode_prefix(b_seq, layer)
        r_b = model.encode_prefix(reference_for(b_seq), layer)
        s = float(model.encode_shifted(a_seq) @ model.encode_shifted(b_seq))
    if not math.isfinite(s):
        raise NumericalError("non-finite score")
    tt, big = attribute_representations(model.tail(layer), a, r_a, b, r_b, steps, scheme, full, batch_size, workers)
    tt_np = tt.detach().numpy()
    return AttributionOutput(
        tokens_a=model.tokens(a_seq),
        tokens_b=model.tokens(b_seq),
        layer=layer,
        steps=steps,
        scheme=scheme,
        score=s,
        attribution_sum=total(tt_np),
        matrix=tt_np,
        full=None if big is None else big.detach().numpy(),
    )


@dataclass(frozen=True)
class DecompositionCheck:
    attribution_sum: float
    four_term: float
    residual: float


def decomposition_check_representations(tail, a, r_a, b, r_b, steps: int, scheme: str = "midpoint",
                                        batch_size: int = DEFAULT_BATCH, workers: int | None = 1) -> DecompositionCheck:
    """Compare the attribution sum to f(a,b) - f(a,r_b) - f(r_a,b) + f(r_a,r_b), unshifted."""
    tt, _ = attribute_representations(tail, a, r_a, b, r_b, steps, scheme, False, batch_size, workers)
    with torch.no_grad():
        ea, eb, era, erb = tail(a), tail(b), tail(r_a), tail(r_b)
        four = float(ea @ eb) - float(ea @ erb) - float(era @ eb) + float(era @ erb)
    s = total(tt.detach().numpy())
    return DecompositionCheck(s, four, s - four)


def decomposition_check(model: SiameseEncoder, a_seq: TokenSequence, b_seq: TokenSequence, layer: int,
                        steps: int, scheme: str = "midpoint", ref_a: torch.Tensor | None = None,
                        ref_b: torch.Tensor | None = None, **kw) -> DecompositionCheck:
    """Four-term identity on the unshifted model; references default to the padding inputs."""
    with torch.no_grad():
        a = model.encode_prefix(a_seq, layer)
        b = model.encode_prefix(b_seq, layer)
        r_a = model.encode_prefix(reference_for(a_seq), layer) if ref_a is None else ref_a
        r_b = model.encode_prefix(reference_for(b_seq), layer) if ref_b is None else ref_b
    return decomposition_check_representations(model.tail(layer), a, r_a, b, r_b, steps, scheme, **kw)


def integrated_gradients_representations(tail, a, r_a, other: torch.Tensor, steps: int,
                                         scheme: str = "midpoint", batch_size: int = DEFAULT_BATCH,
                                         workers: int | None = 1) -> torch.Tensor:
    """Single-input integrated gradients of ``x -> tail(x) . other`` from ``r_a`` to ``a``."""
    path = PathSpec(r_a, a, steps, scheme)
    avg_grad = _path_sum(lambda pts: batched_score_gradient(tail, pts, other), path, batch_size, workers)
    return path.delta.reshape(-1) * avg_grad


def integrated_gradients_single(model: SiameseEncoder, a_seq: TokenSequence, b_seq: TokenSequence, layer: int,
                                steps: int, scheme: str = "midpoint", shifted: bool = True,
                                batch_size: int = DEFAULT_BATCH, workers: int | None = 1) -> torch.Tensor:
    """Per-feature attributions (S_a*D,) of f(., b) with ``b`` held fixed.

    The sum approaches f(a, b) - f(r_a, b).
    """
    with torch.no_grad():
        a = model.encode_prefix(a_seq, layer)
        r_a = model.encode_prefix(reference_for(a_seq), layer)
        other = model.embedding(b_seq, shifted)
    return integrated_gradients_representations(model.tail(layer), a, r_a, other, steps, scheme, batch_size, workers)


@dataclass(frozen=True)
class SweepRow:
    layer: int
    steps: int
    mean_abs_error: float
    std_abs_error: float
    mean_rel_error: float
    std_rel_error: float


def convergence_sweep(model: SiameseEncoder, pairs: Sequence[tuple[TokenSequence, TokenSequence]],
                      layers: Sequence[int], steps_list: Sequence[int], scheme: str = "midpoint",
                      batch_size: int = DEFAULT_BATCH, workers: int | None = 1) -> list[SweepRow]:
    """Attribution error statistics per (layer, N), rows ordered by layer then N as given."""
    if not pairs or not layers or not steps_list:
        raise UsageError("sweep needs nonempty pairs, layers and step counts")
    rows = []
    for layer in layers:
        for steps in steps_list:
            outs = [attribute(model, a, b, layer, steps, scheme, batch_size=batch_size, workers=workers)
                    for a, b in pairs]
            abs_err = np.array([o.error for o in outs])
            rel_err = np.array([o.relative_error for o in outs])
            rows.append(SweepRow(layer, steps, float(abs_err.mean()), float(abs_err.std()),
                                 float(rel_err.mean()), float(rel_err.std())))
    return rows
