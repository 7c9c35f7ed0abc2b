"""Coarse-graph Laplacian and Laplacian positional encodings via Lanczos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from .coarsen import CoarseGraph


class LanczosError(RuntimeError):
    pass


def laplacian(coarse: CoarseGraph) -> sp.csr_matrix:
    """Combinatorial Laplacian ``D - A`` with unit edge weights."""
    n = coarse.num_nodes
    e = coarse.edges
    A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    A.data[:] = 1.0  # duplicate entries collapse to a single unit weight
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()


def _matvec(L):
    if sp.issparse(L):
        return lambda v: L @ v
    L = np.asarray(L)
    return lambda v: L @ v


def _is_symmetric(L) -> bool:
    if sp.issparse(L):
        diff = abs(L - L.T)
        scale = abs(L).max() if L.nnz else 0.0
        return diff.nnz == 0 or diff.max() <= 1e-12 * max(scale, 1.0)
    L = np.asarray(L)
    return bool(np.allclose(L, L.T, rtol=0, atol=1e-12 * max(np.abs(L).max(), 1.0)))


def lanczos(L, num_steps: int, rng: np.random.Generator, max_restarts: int = 3):
    """Lanczos tridiagonalisation with full (two-pass) reorthogonalisation.

    When the Krylov space becomes invariant (beta ~ 0) the iteration continues
    from a fresh random vector orthogonal to all previous Lanczos vectors, so
    degenerate eigenvalues and disconnected components are all reached.
    Returns the basis Q (n x m) and the tridiagonal coefficients.
    """
    n = L.shape[0]
    mv = _matvec(L)
    m = min(num_steps, n)
    Q = np.zeros((n, m))
    alpha = np.zeros(m)
    beta = np.zeros(max(m - 1, 0))
    scale = max(float(abs(L).max()) if sp.issparse(L) else float(np.abs(L).max()), 1.0)

    def fresh(j):
        for _ in range(max_restarts + 1):
            v = rng.standard_normal(n)
            for _ in range(2):
                v -= Q[:, :j] @ (Q[:, :j].T @ v)
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                return v / nv
        raise LanczosError(f"Lanczos breakdown: no new direction after {max_restarts} restarts")

    q = fresh(0)
    for j in range(m):
        Q[:, j] = q
        w = mv(q)
        alpha[j] = q @ w
        if j == m - 1:
            break
        w = w - alpha[j] * q
        if j > 0:
            w -= beta[j - 1] * Q[:, j - 1]
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        b = np.linalg.norm(w)
        if b <= 1e-10 * scale:
            beta[j] = 0.0
            q = fresh(j + 1)
        else:
            beta[j] = b
            q = w / b
    return Q, alpha, beta


def smallest_nonzero_eigenpairs(L, k: int, zero_tol: float = 1e-8, seed: int = 0):
    """The ``k`` smallest eigenvalues above ``zero_tol`` and their eigenvectors.

    Returns ``(values, vectors)`` with values ascending and vectors as columns.
    Fewer than ``k`` pairs come back when the spectrum has fewer non-zero values.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = L.shape[0]
    if L.shape != (n, n) or not _is_symmetric(L):
        raise ValueError("Laplacian must be square and symmetric")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    rng = np.random.default_rng(seed)
    mv = _matvec(L)
    steps = min(n, 2 * k + 20)
    while True:
        Q, alpha, beta = lanczos(L, steps, rng)
        theta, S = eigh_tridiagonal(alpha, beta) if len(alpha) > 1 else (alpha.copy(), np.ones((1, 1)))
        U = Q @ S
        keep = np.flatnonzero(theta >= zero_tol)[:k]
        vals, vecs = theta[keep], U[:, keep]
        vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
        res = np.array([np.linalg.norm(mv(vecs[:, i]) - vals[i] * vecs[:, i]) for i in range(len(keep))])
        ok = np.all(res <= 1e-8 * np.maximum(1.0, vals))
        if ok and (len(keep) == k or steps == n):
            return vals, vecs
        if steps == n:
            raise LanczosError(f"Lanczos residual {res.max():.3e} above tolerance at full dimension")
        steps = min(n, 2 * steps)


def canonicalize_signs(vectors: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Entries within ``tie_tol`` of the maximum magnitude count as tied and the
    lowest index among them decides the sign.
    """
    out = np.array(vectors, dtype=np.float64, copy=True)
    for j in range(out.shape[1]):
        col = out[:, j]
        mag = np.abs(col)
        top = mag.max() if col.size else 0.0
        if top == 0:
            continue
        i = int(np.flatnonzero(mag >= top - tie_tol)[0])
        if col[i] < 0:
            out[:, j] = -col
    return out


@dataclass(frozen=True, eq=False)
class PositionalEncoding:
    matrix: np.ndarray  # N^c x k
    eigenvalues: np.ndarray  # length <= k

    @property
    def k(self) -> int:
        return self.matrix.shape[1]


def positional_encoding(eigenpairs, num_nodes: int, k: int) -> PositionalEncoding:
    """Stack sign-canonical eigenvectors as columns, zero-padding up to ``k``."""
    if k < 1:
        raise ValueError("positional encoding width k must be >= 1")
    vals, vecs = eigenpairs
    vecs = np.asarray(vecs).reshape(num_nodes, -1)[:, :k]
    mat = np.zeros((num_nodes, k))
    mat[:, : vecs.shape[1]] = canonicalize_signs(vecs)
    return PositionalEncoding(mat, np.asarray(vals)[:k].copy())


def laplacian_pe(coarse: CoarseGraph, k: int, zero_tol: float = 1e-8) -> PositionalEncoding:
    if k < 1:
        raise ValueError("positional encoding width k must be >= 1")
    L = laplacian(coarse)
    pairs = smallest_nonzero_eigenpairs(L, k, zero_tol)
    return positional_encoding(pairs, coarse.num_nodes, k)
