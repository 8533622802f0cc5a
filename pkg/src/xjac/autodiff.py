"""Jacobians of encoder tails with respect to a representation.

A *tail* is any function mapping a representation of shape (S, D) to an
embedding of shape (E,) that is written with batch-agnostic torch ops.
Jacobians are returned flattened as (E, S*D) with index ``i = s*D + d``.
"""
from __future__ import annotations

import threading

import torch
from torch.func import grad, jacrev, jvp, vmap

from xjac.errors import NumericalError

DEFAULT_FD_STEP = 1e-4

# torch keeps forward-mode dual levels in process-wide state, so concurrent
# jvp calls from worker threads corrupt each other
_FORWARD_LOCK = threading.Lock()


def jacobian(tail, x: torch.Tensor) -> torch.Tensor:
    """Exact reverse-mode Jacobian of ``tail`` at ``x``, shape (E, x.numel())."""
    jac = jacrev(tail)(x)
    return jac.reshape(jac.shape[0], -1)


def batched_jacobian(tail, xs: torch.Tensor) -> torch.Tensor:
    """Jacobians at a stack of points ``xs`` (B, S, D) -> (B, E, S*D)."""
    jac = vmap(jacrev(tail))(xs)
    return jac.reshape(jac.shape[0], jac.shape[1], -1)


def _first_nonfinite_layer(model, rep: torch.Tensor, layer: int) -> int | None:
    x = rep
    for k in range(layer, model.num_layers):
        x = model.blocks[k](x)
        if not torch.isfinite(x).all():
            return k + 1
    return None


def suffix_jacobian(model, rep: torch.Tensor, layer: int) -> torch.Tensor:
    """Jacobian of ``model.encode_suffix(., layer)`` at ``rep``, shape (D_emb, S*D)."""
    if not torch.isfinite(rep).all():
        raise NumericalError(f"non-finite values in the layer {layer} representation")
    jac = jacobian(model.tail(layer), rep)
    if not torch.isfinite(jac).all():
        bad = _first_nonfinite_layer(model, rep, layer)
        where = f"layer {bad}" if bad is not None else f"the tail above layer {layer}"
        raise NumericalError(f"non-finite activations or derivatives in {where}")
    return jac


def finite_diff_jacobian(tail, x: torch.Tensor, h: float = DEFAULT_FD_STEP) -> torch.Tensor:
    """Central-difference Jacobian, one +-h probe pair per input component."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    n = x.numel()
    eye = torch.eye(n, dtype=x.dtype).reshape(n, *x.shape)
    with torch.no_grad():
        plus = vmap(tail)(x + h * eye)
        minus = vmap(tail)(x - h * eye)
    return ((plus - minus) / (2 * h)).T


def score_gradient(tail, rep: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
    """Gradient of ``x -> tail(x) . other`` at ``rep``, flattened to S*D."""
    return grad(lambda x: tail(x) @ other)(rep).reshape(-1)


def batched_score_gradient(tail, xs: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
    g = vmap(grad(lambda x: tail(x) @ other))(xs)
    return g.reshape(g.shape[0], -1)


def batched_token_jvp(tail, xs: torch.Tensor, tangents: torch.Tensor) -> torch.Tensor:
    """Jacobian-vector products J(x_b) t_j for every point and tangent -> (B, T, E)."""

    def one(x, t):
        return jvp(tail, (x,), (t,))[1]

    with _FORWARD_LOCK:
        return vmap(vmap(one, in_dims=(None, 0)), in_dims=(0, None))(xs, tangents)
