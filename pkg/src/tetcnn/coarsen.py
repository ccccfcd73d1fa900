"""Graclus-style coarsening with the LBO affinity, hierarchies and max pooling.

Padded layout: at every level, vertices are reordered (and padded with fake
nodes) so that the two members of each cluster sit at flat indices
``2j, 2j + 1`` and are pooled into index ``j`` of the next level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import rng as rng_mod
from .lbo import OperatorPair, ScaledOperator, lambda_max

SINGLETON = -1
FAKE = -1
MODES = ("galerkin", "eq8-literal")


class HierarchyError(RuntimeError):
    pass


# --------------------------------------------------------------------------- matching


def affinity(op: OperatorPair, i: int, j: int) -> float:
    """``k_ij (1/d_i + 1/d_j)`` with ``k_ij = -S_ij``; may be negative."""
    if i == j:
        raise ValueError("affinity needs two distinct vertices")
    row = op.S.indices[op.S.indptr[i] : op.S.indptr[i + 1]]
    hit = np.flatnonzero(row == j)
    if not len(hit):
        raise ValueError(f"({i}, {j}) is not an edge of the operator")
    k = -op.S.data[op.S.indptr[i] + hit[0]]
    return float(k * (1.0 / op.mass[i] + 1.0 / op.mass[j]))


def affinity_matrix(op: OperatorPair) -> sp.csr_matrix:
    S = op.S.tocoo()
    off = S.row != S.col
    r, c = S.row[off], S.col[off]
    w = -S.data[off] * (1.0 / op.mass[r] + 1.0 / op.mass[c])
    A = sp.csr_matrix((w, (r, c)), shape=S.shape)
    A.sort_indices()
    return A


@dataclass(frozen=True, eq=False)
class Matching:
    partner: np.ndarray  # partner index or SINGLETON
    level: int = 0

    @property
    def n_clusters(self) -> int:
        return int(np.sum(self.partner == SINGLETON) + np.sum(self.partner != SINGLETON) // 2)

    def parents(self) -> np.ndarray:
        """Cluster id per vertex; clusters numbered by their smallest member."""
        n = len(self.partner)
        first = np.where(self.partner == SINGLETON, np.arange(n), np.minimum(np.arange(n), self.partner))
        uniq, parents = np.unique(first, return_inverse=True)
        return parents.astype(np.int64)


def graclus_match(op: OperatorPair, seed: int = 0, level: int = 0, order: np.ndarray | None = None) -> Matching:
    """Greedy matching on maximum positive affinity.

    Vertices are visited in a seeded random permutation (or ``order``). Each
    unmatched vertex takes the unmatched neighbour with the largest positive
    affinity (ties to the lower index); otherwise it stays a singleton.
    """
    n = op.n
    if order is None:
        order = rng_mod.stream(seed, "matching", level).permutation(n)
    A = affinity_matrix(op)
    partner = np.full(n, SINGLETON, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    indptr, indices, data = A.indptr, A.indices, A.data
    for v in order:
        if done[v]:
            continue
        done[v] = True
        lo, hi = indptr[v], indptr[v + 1]
        nbrs, w = indices[lo:hi], data[lo:hi]
        ok = (~done[nbrs]) & (w > 0)
        if not ok.any():
            continue
        cand, cw = nbrs[ok], w[ok]
        best = cand[np.argmax(cw)]  # indices are sorted, so ties go to the lowest index
        partner[v], partner[best] = best, v
        done[best] = True
    return Matching(partner, level)


# --------------------------------------------------------------------------- assignment + coarse operators


def assignment_matrix(parents: np.ndarray, n_coarse: int | None = None) -> sp.csr_matrix:
    n = len(parents)
    n_coarse = int(parents.max()) + 1 if n_coarse is None else n_coarse
    return sp.csr_matrix((np.ones(n), (np.arange(n), parents)), shape=(n, n_coarse))


def coarsen_operators(op: OperatorPair, G: sp.spmatrix, mode: str = "galerkin"):
    """Galerkin: ``(G^T S G, G^T d)``. eq8-literal: ``G^T (D^-1 S) G`` as a general matrix."""
    if G.shape[0] != op.n:
        raise ValueError(f"assignment has {G.shape[0]} rows, operator has {op.n}")
    G = sp.csr_matrix(G)
    if mode == "galerkin":
        S = (G.T @ op.S @ G).tocsr()
        S.sort_indices()
        mass = np.asarray(G.T @ op.mass).ravel()
        return OperatorPair(S, mass, None, op.kind, op.lumping)
    if mode == "eq8-literal":
        Lc = (G.T @ op.laplacian() @ G).tocsr()
        Lc.sort_indices()
        return Lc
    raise ValueError(f"unknown coarsening mode {mode!r}")


# --------------------------------------------------------------------------- hierarchy


@dataclass(frozen=True, eq=False)
class Level:
    op: OperatorPair  # unpadded operator with lambda_max set
    parents: np.ndarray | None  # cluster id per vertex in the next level (None on the last level)
    perm: np.ndarray  # padded slot -> vertex index, FAKE for padding

    @property
    def n(self) -> int:
        return self.op.n

    @property
    def n_padded(self) -> int:
        return len(self.perm)

    @property
    def n_fake(self) -> int:
        return int(np.sum(self.perm == FAKE))

    def real_mask(self) -> np.ndarray:
        return self.perm != FAKE

    def pairs(self) -> np.ndarray:
        """Pooling plan for this level: (n_padded/2, 2) vertex ids, FAKE allowed."""
        return self.perm.reshape(-1, 2)

    def padded_operator(self) -> ScaledOperator:
        """Scaled operator permuted into the padded layout; fake rows are empty."""
        real = self.perm != FAKE
        slots = np.flatnonzero(real)
        P = sp.csr_matrix((np.ones(len(slots)), (slots, self.perm[real])), shape=(self.n_padded, self.n))
        S = (P @ self.op.S @ P.T).tocsr()
        S.sort_indices()
        scale = np.zeros(self.n_padded)
        scale[slots] = 2.0 / (self.op.lambda_max * self.op.mass[self.perm[real]])
        return ScaledOperator(S, scale)


@dataclass(frozen=True, eq=False)
class Hierarchy:
    levels: list[Level]

    @property
    def depth(self) -> int:
        """Number of coarsening stages."""
        return len(self.levels) - 1

    def pad(self, X: np.ndarray) -> np.ndarray:
        perm = self.levels[0].perm
        out = np.zeros((len(perm),) + X.shape[1:], dtype=X.dtype)
        real = perm != FAKE
        out[real] = X[perm[real]]
        return out

    def unpad(self, Xp: np.ndarray, level: int = 0) -> np.ndarray:
        lv = self.levels[level]
        real = lv.perm != FAKE
        out = np.zeros((lv.n,) + Xp.shape[1:], dtype=Xp.dtype)
        out[lv.perm[real]] = Xp[real]
        return out

    def prolong(self, values: np.ndarray, from_level: int, to_level: int = 0) -> np.ndarray:
        """Copy coarse values down to member vertices, level by level."""
        for lv in range(from_level - 1, to_level - 1, -1):
            values = values[self.levels[lv].parents]
        return values


def compute_perms(parents: list[np.ndarray], n_last: int) -> list[np.ndarray]:
    """Balanced binary-tree layout with fake nodes (coarsest level first unpadded)."""
    perms = [np.arange(n_last, dtype=np.int64)]
    for par in reversed(parents):
        children: dict[int, list[int]] = {}
        for v, p in enumerate(par.tolist()):
            children.setdefault(p, []).append(v)
        out = []
        for slot in perms[-1].tolist():
            kids = children.get(slot, []) if slot != FAKE else []
            if len(kids) > 2:
                raise HierarchyError("cluster with more than two members")
            out.extend(kids + [FAKE] * (2 - len(kids)))
        perms.append(np.array(out, dtype=np.int64))
    return perms[::-1]


def build_hierarchy(op0: OperatorPair, levels: int, seed: int = 0, lambda_tol: float = 1e-7) -> Hierarchy:
    """``levels`` stages of match -> assign -> Galerkin coarsen, then the padded layout."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    ops = [op0]
    parents = []
    for lv in range(levels):
        op = ops[-1]
        if op.n < 2:
            raise HierarchyError(f"mesh exhausted at stage {lv}: {op.n} vertex left")
        par = graclus_match(op, seed, level=lv).parents()
        parents.append(par)
        ops.append(coarsen_operators(op, assignment_matrix(par), "galerkin"))
    ops = [o if o.lambda_max is not None else o.with_lambda_max(tol=lambda_tol, seed=seed) for o in ops]
    perms = compute_perms(parents, ops[-1].n)
    out = [Level(ops[i], parents[i] if i < levels else None, perms[i]) for i in range(levels + 1)]
    return Hierarchy(out)


# --------------------------------------------------------------------------- pooling


@dataclass(frozen=True, eq=False)
class PoolCache:
    argmax: np.ndarray  # (n_out, F) in {0, 1}
    shape: tuple[int, int]


def pool_forward(X: np.ndarray, pairs: np.ndarray | None = None) -> tuple[np.ndarray, PoolCache]:
    """Max over adjacent index pairs; ties go to the first entry."""
    n, F = X.shape
    if n % 2:
        raise ValueError(f"padded input must have an even number of rows, got {n}")
    if pairs is not None and len(pairs) * 2 != n:
        raise ValueError(f"pooling plan covers {2 * len(pairs)} rows, input has {n}")
    Xr = X.reshape(n // 2, 2, F)
    arg = (Xr[:, 1, :] > Xr[:, 0, :]).astype(np.int8)
    out = np.where(arg == 1, Xr[:, 1, :], Xr[:, 0, :])
    return out, PoolCache(arg, (n, F))


def pool_backward(grad_out: np.ndarray, cache: PoolCache, fake_mask: np.ndarray | None = None) -> np.ndarray:
    n, F = cache.shape
    if grad_out.shape != (n // 2, F):
        raise ValueError(f"stale pooling cache: expected gradient of shape {(n // 2, F)}, got {grad_out.shape}")
    g = np.zeros((n // 2, 2, F), dtype=grad_out.dtype)
    first = cache.argmax == 0
    g[:, 0, :] = np.where(first, grad_out, 0.0)
    g[:, 1, :] = np.where(first, 0.0, grad_out)
    g = g.reshape(n, F)
    if fake_mask is not None:
        g[fake_mask] = 0.0
    return g
