"""Independent reference implementations used only by the tests.

Nothing here imports the assembly or filtering code under test.
"""

from __future__ import annotations

import itertools

import numpy as np


def dihedral_at_edge(p, a, b, c, d) -> float:
    """Interior angle at edge (a, b) between faces (a, b, c) and (a, b, d), via face normals."""
    pa, pb, pc, pd = (np.asarray(p[i], float) for i in (a, b, c, d))
    e = pb - pa
    n1 = np.cross(e, pc - pa)
    n2 = np.cross(e, pd - pa)
    # atan2 keeps full precision near 0 and pi, where arccos of the cosine does not
    return float(np.arctan2(np.linalg.norm(np.cross(n1, n2)), np.dot(n1, n2)))


def dense_cot_stiffness(vertices, tets) -> np.ndarray:
    """``S = W - K`` with ``k_ij = 1/12 * sum_tets |opposite edge| * cot(dihedral at the opposite edge)``."""
    n = len(vertices)
    S = np.zeros((n, n))
    for tet in tets:
        for i, j in itertools.combinations(range(4), 2):
            k, l = (m for m in range(4) if m not in (i, j))
            vi, vj, vk, vl = tet[i], tet[j], tet[k], tet[l]
            theta = dihedral_at_edge(vertices, vk, vl, vi, vj)
            length = np.linalg.norm(np.asarray(vertices[vk]) - np.asarray(vertices[vl]))
            w = length / np.tan(theta) / 12.0
            S[vi, vj] -= w
            S[vj, vi] -= w
            S[vi, vi] += w
            S[vj, vj] += w
    return S


def p1_fem_stiffness(vertices, tets) -> np.ndarray:
    """Linear finite-element stiffness ``int grad(phi_i) . grad(phi_j)`` from barycentric gradients."""
    n = len(vertices)
    K = np.zeros((n, n))
    for tet in tets:
        P = np.asarray([vertices[i] for i in tet], float)
        M = np.hstack([np.ones((4, 1)), P])
        vol = abs(np.linalg.det(M)) / 6.0
        G = np.linalg.inv(M)[1:, :]  # columns: gradients of the 4 barycentric coordinates
        local = vol * G.T @ G
        for a in range(4):
            for b in range(4):
                K[tet[a], tet[b]] += local[a, b]
    return K


def tet_volumes(vertices, tets) -> np.ndarray:
    out = []
    for tet in tets:
        a, b, c, d = (np.asarray(vertices[i], float) for i in tet)
        out.append(abs(np.dot(b - a, np.cross(c - a, d - a))) / 6.0)
    return np.array(out)


def lumped_mass(vertices, tets, share: float) -> np.ndarray:
    m = np.zeros(len(vertices))
    for tet, v in zip(tets, tet_volumes(vertices, tets)):
        for i in tet:
            m[i] += share * v
    return m


def generalized_eigh(S: np.ndarray, mass: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``S phi = lambda D phi`` with D-orthonormal eigenvectors."""
    r = 1.0 / np.sqrt(mass)
    lam, U = np.linalg.eigh(r[:, None] * S * r[None, :])
    return lam, r[:, None] * U


def exact_filter(S: np.ndarray, mass: np.ndarray, coeffs: np.ndarray, X: np.ndarray, lam_max: float) -> np.ndarray:
    """``sum_m Phi T_m(2 Lambda / lam_max - 1) Phi^T D X theta_m`` by full eigendecomposition."""
    lam, Phi = generalized_eigh(S, mass)
    x = 2.0 * lam / lam_max - 1.0
    Xs = Phi.T @ (mass[:, None] * X)
    out = np.zeros((X.shape[0], coeffs.shape[2]))
    for m in range(coeffs.shape[0]):
        Tm = np.cos(m * np.arccos(np.clip(x, -1.0, 1.0)))
        out += Phi @ (Tm[:, None] * Xs) @ coeffs[m]
    return out


def hop_ball(n: int, edges, source: int, k: int) -> set[int]:
    nbrs = {i: set() for i in range(n)}
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    ball, frontier = {source}, {source}
    for _ in range(k):
        frontier = set().union(*(nbrs[v] for v in frontier)) - ball
        ball |= frontier
    return ball
