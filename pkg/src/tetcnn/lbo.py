"""Volumetric Laplace-Beltrami operator on tetrahedral meshes.

The stiffness matrix is stored in the positive-semidefinite convention
``S = W - K`` (off-diagonal ``-k_ij``, diagonal ``sum_j k_ij``) and the
operator is ``L = D^-1 S`` with a lumped diagonal mass ``D``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import rng as rng_mod
from .tetmesh import TetMesh, edge_cotangent_weights, signed_volumes

COT_CONSTANT = 1.0 / 12.0
LUMPINGS = ("fem-quarter", "paper-literal")


class LambdaMaxError(RuntimeError):
    def __init__(self, estimate: float, iterations: int):
        super().__init__(f"largest-eigenvalue iteration did not converge after {iterations} iterations (last estimate {estimate:.9g})")
        self.estimate = estimate


@dataclass(frozen=True, eq=False)
class OperatorPair:
    """Stiffness ``S`` (symmetric CSR, full storage) and lumped mass vector."""

    S: sp.csr_matrix
    mass: np.ndarray
    lambda_max: float | None = None
    kind: str = "lbo"
    lumping: str = "fem-quarter"

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def nnz(self) -> int:
        return self.S.nnz

    def laplacian(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.mass).dot(self.S).tocsr()

    def with_lambda_max(self, value: float | None = None, **kw) -> "OperatorPair":
        if value is None:
            value = lambda_max(self, **kw)
        return replace(self, lambda_max=float(value))


def _symmetric_from_edges(n: int, edges: np.ndarray, weights: np.ndarray) -> sp.csr_matrix:
    """Assemble S from unique edges (i < j) and their weights k_ij."""
    diag = np.bincount(edges[:, 0], weights=weights, minlength=n) + np.bincount(edges[:, 1], weights=weights, minlength=n)
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    vals = np.concatenate([-weights, -weights, diag])
    S = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    S.sort_indices()
    return S


def edge_weights(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique edges (E, 2) and string constants k_ij = 1/12 sum_m l_m cot(theta_m)."""
    ends, lcot = edge_cotangent_weights(mesh)
    key = ends[:, 0] * mesh.n + ends[:, 1]
    uniq, inverse = np.unique(key, return_inverse=True)
    k = np.bincount(inverse, weights=lcot) * COT_CONSTANT
    edges = np.stack([uniq // mesh.n, uniq % mesh.n], axis=1)
    return edges, k


def assemble_stiffness(mesh: TetMesh) -> sp.csr_matrix:
    edges, k = edge_weights(mesh)
    return _symmetric_from_edges(mesh.n, edges, k)


def assemble_mass(mesh: TetMesh, lumping: str = "fem-quarter") -> np.ndarray:
    if lumping not in LUMPINGS:
        raise ValueError(f"unknown lumping {lumping!r}; choose from {LUMPINGS}")
    vol = np.abs(signed_volumes(mesh.vertices, mesh.tets))
    d = np.zeros(mesh.n)
    for c in range(4):
        d += np.bincount(mesh.tets[:, c], weights=vol, minlength=mesh.n)
    isolated = np.flatnonzero(d <= 0)
    if len(isolated):
        raise ValueError(f"vertex {isolated[0]} has no incident tetrahedron")
    return d / 4.0 if lumping == "fem-quarter" else d


def assemble_lbo(mesh: TetMesh, lumping: str = "fem-quarter", with_lambda_max: bool = False, seed: int = 0) -> OperatorPair:
    op = OperatorPair(assemble_stiffness(mesh), assemble_mass(mesh, lumping), None, "lbo", lumping)
    return op.with_lambda_max(seed=seed) if with_lambda_max else op


def assemble_graph_laplacian(mesh: TetMesh, with_lambda_max: bool = False, seed: int = 0) -> OperatorPair:
    edges = mesh.edges()
    S = _symmetric_from_edges(mesh.n, edges, np.ones(len(edges)))
    op = OperatorPair(S, np.ones(mesh.n), None, "graph", "none")
    return op.with_lambda_max(seed=seed) if with_lambda_max else op


def assemble_operator(mesh: TetMesh, operator: str = "lbo", lumping: str = "fem-quarter") -> OperatorPair:
    if operator == "lbo":
        return assemble_lbo(mesh, lumping)
    if operator == "graph":
        return assemble_graph_laplacian(mesh)
    raise ValueError(f"unknown operator {operator!r}")


def lambda_max(op: OperatorPair, tol: float = 1e-7, maxiter: int = 5000, seed: int = 0, method: str = "lanczos") -> float:
    """Largest generalized eigenvalue of (S, D).

    Both methods work on the symmetric ``D^-1/2 S D^-1/2`` from a seeded
    start vector. ``power`` is plain power iteration whose stopping rule
    extrapolates the (monotone) Rayleigh-quotient increments geometrically,
    so ``tol`` bounds the remaining relative error rather than the last step;
    it is slow when the top of the spectrum is clustered, which is common on
    coarsened shells. ``lanczos`` (ARPACK) is the default.
    """
    n = op.n
    if n == 1:
        return max(float(op.S[0, 0] / op.mass[0]), 0.0)
    s = 1.0 / np.sqrt(op.mass)
    A = sp.diags(s).dot(op.S).dot(sp.diags(s)).tocsr()
    x = rng_mod.stream(seed, "power", n).standard_normal(n)
    x /= np.linalg.norm(x)
    if method == "lanczos":
        return _lambda_max_lanczos(A, x, tol, maxiter)
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    y = A @ x
    rho = float(x @ y)
    prev_delta = None
    for it in range(1, maxiter + 1):
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        y = A @ x
        new = float(x @ y)
        delta = abs(new - rho)
        rho = new
        if delta <= 1e-15 * abs(rho):
            return rho
        if prev_delta is not None and prev_delta > 0:
            ratio = delta / prev_delta
            if ratio < 1.0:
                remaining = delta * ratio / (1.0 - ratio)
                if remaining <= tol * abs(rho):
                    return rho
        prev_delta = delta
    raise LambdaMaxError(rho, maxiter)


def _lambda_max_lanczos(A: sp.csr_matrix, x0: np.ndarray, tol: float, maxiter: int) -> float:
    from scipy.sparse.linalg import ArpackNoConvergence, eigsh

    n = A.shape[0]
    if n <= 16:
        return float(np.linalg.eigvalsh(A.toarray())[-1])
    try:
        val = eigsh(A, k=1, which="LA", v0=x0, tol=min(tol, 1e-10) * 1e-2, maxiter=maxiter, return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        est = float(exc.eigenvalues[0]) if len(exc.eigenvalues) else float("nan")
        raise LambdaMaxError(est, maxiter) from exc
    return float(val[0])


@dataclass(frozen=True, eq=False)
class ScaledOperator:
    """``L~ = (2 / lambda_max) D^-1 S - I`` applied matrix-free.

    ``row_scale`` holds ``2 / (lambda_max * d_i)``; it is a per-row vector so
    several meshes (with their own lambda_max) can share one block-diagonal
    operator. Rows with zero scale and empty stiffness are padding.
    """

    S: sp.csr_matrix
    row_scale: np.ndarray

    @property
    def n(self) -> int:
        return self.S.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.shape[0] != self.n:
            raise ValueError(f"operator has {self.n} rows, input has {X.shape[0]}")
        SX = self.S @ X
        if X.ndim == 1:
            return self.row_scale * SX - X
        return self.row_scale[:, None] * SX - X

    def apply_transpose(self, X: np.ndarray) -> np.ndarray:
        if X.shape[0] != self.n:
            raise ValueError(f"operator has {self.n} rows, input has {X.shape[0]}")
        scaled = self.row_scale * X if X.ndim == 1 else self.row_scale[:, None] * X
        return self.S @ scaled - X

    def dense(self) -> np.ndarray:
        return self.row_scale[:, None] * self.S.toarray() - np.eye(self.n)

    @staticmethod
    def stack(ops: list["ScaledOperator"]) -> "ScaledOperator":
        """Block-diagonal concatenation (pure CSR array concatenation)."""
        if len(ops) == 1:
            return ops[0]
        indptr, indices, data = [np.zeros(1, dtype=np.int64)], [], []
        row0 = nnz0 = 0
        for op in ops:
            S = op.S
            indptr.append(S.indptr[1:].astype(np.int64) + nnz0)
            indices.append(S.indices.astype(np.int64) + row0)
            data.append(S.data)
            row0 += S.shape[0]
            nnz0 += S.nnz
        S = sp.csr_matrix(
            (np.concatenate(data), np.concatenate(indices), np.concatenate(indptr)), shape=(row0, row0)
        )
        return ScaledOperator(S, np.concatenate([op.row_scale for op in ops]))


def scaled_operator(op: OperatorPair) -> ScaledOperator:
    if op.lambda_max is None:
        raise ValueError("lambda_max is not set on this operator")
    if op.lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {op.lambda_max}")
    return ScaledOperator(op.S, 2.0 / (op.lambda_max * op.mass))


# --------------------------------------------------------------------------- exact spectral path


@dataclass(frozen=True, eq=False)
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # D-orthonormal columns


def dense_eigensystem(op: OperatorPair, cap: int = 500) -> EigenSystem:
    if op.n > cap:
        raise ValueError(f"dense eigensolve limited to {cap} vertices, mesh has {op.n}")
    s = 1.0 / np.sqrt(op.mass)
    A = s[:, None] * op.S.toarray() * s[None, :]
    A = 0.5 * (A + A.T)
    lam, V = np.linalg.eigh(A)
    return EigenSystem(lam, s[:, None] * V)


def spectral_filter_exact(eig: EigenSystem, mass: np.ndarray, f_values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``Phi diag(f) Phi^T D x`` (inverse transform weighted by the mass)."""
    Phi = eig.eigenvectors
    if x.shape[0] != Phi.shape[0] or len(f_values) != Phi.shape[1]:
        raise ValueError("length mismatch between eigensystem, filter and signal")
    coeffs = Phi.T @ (mass * x if x.ndim == 1 else mass[:, None] * x)
    coeffs = f_values * coeffs if x.ndim == 1 else f_values[:, None] * coeffs
    return Phi @ coeffs


def chebyshev_response(theta_scalar: np.ndarray, eigenvalues: np.ndarray, lam_max: float) -> np.ndarray:
    """f(lambda) = sum_m theta_m T_m(2 lambda / lambda_max - 1)."""
    y = 2.0 * eigenvalues / lam_max - 1.0
    return np.polynomial.chebyshev.chebval(y, theta_scalar)


# --------------------------------------------------------------------------- locality helpers


def hop_distances(S: sp.csr_matrix, source: int) -> np.ndarray:
    """Graph distance from ``source`` over the off-diagonal pattern of S (-1 = unreachable)."""
    n = S.shape[0]
    dist = -np.ones(n, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        v = queue.popleft()
        for u in S.indices[S.indptr[v] : S.indptr[v + 1]]:
            if dist[u] < 0:
                dist[u] = dist[v] + 1
                queue.append(u)
    return dist


def power_support(op: OperatorPair, source: int, k: int) -> np.ndarray:
    """Indices where ``L^k delta_source`` is nonzero."""
    L = op.laplacian()
    x = np.zeros(op.n)
    x[source] = 1.0
    for _ in range(k):
        x = L @ x
    return np.flatnonzero(x != 0.0)
