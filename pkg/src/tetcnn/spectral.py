"""Chebyshev spectral convolution with hand-written reverse mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lbo import ScaledOperator


@dataclass(frozen=True, eq=False)
class ChebFilter:
    """Coefficients of shape (K + 1, F_in, F_out); order K is inclusive."""

    theta: np.ndarray

    def __post_init__(self):
        if self.theta.ndim != 3 or self.theta.shape[0] < 1:
            raise ValueError(f"theta must have shape (K+1, F_in, F_out), got {self.theta.shape}")

    @property
    def order(self) -> int:
        return self.theta.shape[0] - 1


@dataclass(frozen=True, eq=False)
class ChebCache:
    basis: list[np.ndarray]
    op: ScaledOperator


def cheb_basis(op: ScaledOperator, X: np.ndarray, K: int) -> list[np.ndarray]:
    """``[T_0(L~) X, ..., T_K(L~) X]`` by the three-term recurrence."""
    if X.shape[0] != op.n:
        raise ValueError(f"operator has {op.n} rows, features have {X.shape[0]}")
    basis = [X]
    if K >= 1:
        basis.append(op.apply(X))
    for _ in range(2, K + 1):
        basis.append(2.0 * op.apply(basis[-1]) - basis[-2])
    return basis


def cheb_conv_forward(theta, op: ScaledOperator, X: np.ndarray) -> tuple[np.ndarray, ChebCache]:
    theta = theta.theta if isinstance(theta, ChebFilter) else theta
    K, F_in, F_out = theta.shape[0] - 1, theta.shape[1], theta.shape[2]
    if X.ndim != 2 or X.shape[1] != F_in:
        raise ValueError(f"filter expects {F_in} input channels, got features of shape {X.shape}")
    basis = cheb_basis(op, X, K)
    Y = basis[0] @ theta[0]
    for m in range(1, K + 1):
        Y = Y + basis[m] @ theta[m]
    return Y, ChebCache(basis, op)


def cheb_conv_backward(grad_Y: np.ndarray, cache: ChebCache, theta) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. theta and X.

    ``grad_X`` runs the recurrence in reverse with the transposed operator
    (L~ is not symmetric when the mass is not uniform).
    """
    theta = theta.theta if isinstance(theta, ChebFilter) else theta
    K = theta.shape[0] - 1
    basis, op = cache.basis, cache.op
    if len(basis) != K + 1 or grad_Y.shape != (basis[0].shape[0], theta.shape[2]):
        raise ValueError("stale or mismatched Chebyshev cache")
    grad_theta = np.stack([basis[m].T @ grad_Y for m in range(K + 1)])
    adj = [grad_Y @ theta[m].T for m in range(K + 1)]
    for m in range(K, 1, -1):
        adj[m - 1] = adj[m - 1] + 2.0 * op.apply_transpose(adj[m])
        adj[m - 2] = adj[m - 2] - adj[m]
    if K >= 1:
        adj[0] = adj[0] + op.apply_transpose(adj[1])
    return grad_theta, adj[0]
