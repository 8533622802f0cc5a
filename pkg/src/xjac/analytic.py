"""Tails with closed-form integrated Jacobians, used to check the engine.

Each tail maps a representation of shape (S, D) (any leading batch dims
allowed) to a flat embedding. With a zero reference, the straight-line
integrated Jacobians are known exactly:

    identity  e(x) = x          J = I
    square    e(x) = x**2       J = diag(x)
    cubic     e(x) = x**3       J = diag(x**2)
"""
from __future__ import annotations

import torch


def _flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(*x.shape[:-2], -1)


def identity_tail(x: torch.Tensor) -> torch.Tensor:
    return _flat(x)


def square_tail(x: torch.Tensor) -> torch.Tensor:
    return _flat(x) ** 2


def cubic_tail(x: torch.Tensor) -> torch.Tensor:
    return _flat(x) ** 3


def linear_tail(weight: torch.Tensor, bias: torch.Tensor | None = None):
    """``e(x) = W mean_s(x) + b``: mean pooling followed by an affine map."""

    def tail(x):
        out = x.mean(dim=-2) @ weight.T
        return out if bias is None else out + bias

    return tail


def exact_integrated_jacobian(name: str, x: torch.Tensor) -> torch.Tensor:
    """Closed-form integrated Jacobian from reference 0 to ``x`` for the elementwise tails."""
    v = x.reshape(-1)
    diag = {"identity": torch.ones_like(v), "square": v, "cubic": v ** 2}[name]
    return torch.diag(diag)
