"""Thin SVD by one-sided (Hestenes) Jacobi rotations.

The rotation sweeps run in a compiled kernel; ordering, sign fixing and
basis completion for null directions are done in numpy afterwards.
"""

from typing import NamedTuple

import numba
import numpy as np

MAX_SWEEPS = 60
_EPS = np.finfo(np.float64).eps


class ThinSVD(NamedTuple):
    """``a == U @ diag(S) @ V.T`` with ``k = min(rows, cols)`` columns."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def k(self):
        return self.S.shape[0]


@numba.njit(cache=True)
def _jacobi_sweeps(G, W, tol, max_sweeps):
    # G holds the columns of A as rows (n, m); W accumulates V as rows (n, n).
    n = G.shape[0]
    m = G.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    gp = G[p, i]
                    gq = G[q, i]
                    alpha += gp * gp
                    beta += gq * gq
                    gamma += gp * gq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    gp = G[p, i]
                    gq = G[q, i]
                    G[p, i] = c * gp - s * gq
                    G[q, i] = s * gp + c * gq
                for i in range(n):
                    wp = W[p, i]
                    wq = W[q, i]
                    W[p, i] = c * wp - s * wq
                    W[q, i] = s * wp + c * wq
        if not rotated:
            return sweep + 1
    return max_sweeps


@numba.njit(cache=True, parallel=True)
def _jacobi_batch(Gs, Ws, tol, max_sweeps):
    sweeps = np.zeros(Gs.shape[0], dtype=np.int64)
    for b in numba.prange(Gs.shape[0]):
        sweeps[b] = _jacobi_sweeps(Gs[b], Ws[b], tol, max_sweeps)
    return sweeps


def _complete_basis(U, deficient):
    """Replace columns ``deficient`` of U with an orthonormal completion."""
    dset = set(deficient)
    good = [j for j in range(U.shape[1]) if j not in dset]
    # trailing columns of a complete QR span the complement of the kept ones
    Q, _ = np.linalg.qr(U[:, good], mode="complete")
    comp = Q[:, len(good):]
    for i, j in enumerate(deficient):
        U[:, j] = comp[:, i]
    return U


def _finish(G, W, m):
    """Turn rotated columns into sorted, sign-fixed, orthonormal factors."""
    S = np.sqrt(np.einsum("ij,ij->i", G, G))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    G = G[order]
    V = W[order].T.copy()
    n = S.shape[0]
    U = np.zeros((m, n))
    cutoff = S[0] * m * _EPS * 10 if n and S[0] > 0 else 0.0
    deficient = []
    for j in range(n):
        if S[j] > cutoff and S[j] > 0:
            U[:, j] = G[j] / S[j]
        else:
            deficient.append(j)
    if deficient:
        U = _complete_basis(U, deficient)
    return _fix_signs(ThinSVD(U, S, V))


def _tolerance(m):
    return max(m, 1) * _EPS


def thin_svd(a):
    """Thin singular value decomposition of a real matrix.

    Parameters
    ----------
    a : (rows, cols) array_like
        Finite real matrix.

    Returns
    -------
    ThinSVD
        ``U`` (rows, k), ``S`` (k,) descending and non-negative, ``V``
        (cols, k), with ``k = min(rows, cols)``. Each column of ``U`` has
        its first non-negligible entry non-negative.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or 0 in a.shape:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    rows, cols = a.shape
    if rows < cols:
        t = thin_svd(a.T)
        return _fix_signs(ThinSVD(t.V, t.S, t.U))
    G = np.array(a.T, order="C")
    W = np.eye(cols)
    _jacobi_sweeps(G, W, _tolerance(rows), MAX_SWEEPS)
    return _finish(G, W, rows)


def _fix_signs(svd):
    # first non-negligible entry of each U column is made non-negative
    U, S, V = svd.U.copy(), svd.S, svd.V.copy()
    for j in range(S.shape[0]):
        col = U[:, j]
        idx = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        if idx.size and col[idx[0]] < 0:
            U[:, j] = -col
            V[:, j] = -V[:, j]
    return ThinSVD(U, S, V)


def thin_svd_batch(stack):
    """Thin SVDs of a stack of equally shaped matrices, shape (b, rows, cols).

    Returns stacked factors ``U`` (b, rows, k), ``S`` (b, k), ``V`` (b, cols, k).
    The per-matrix rotations run in parallel; results do not depend on the
    thread count.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or 0 in stack.shape:
        raise ValueError(f"expected a (b, rows, cols) stack, got shape {stack.shape}")
    if not np.all(np.isfinite(stack)):
        raise ValueError("matrix stack contains non-finite entries")
    b, rows, cols = stack.shape
    wide = rows < cols
    work = stack if wide else np.swapaxes(stack, 1, 2)
    # rows of each G are the columns being orthogonalised
    G = np.array(work, order="C")
    m = G.shape[2]
    n = G.shape[1]
    W = np.ascontiguousarray(np.broadcast_to(np.eye(n), (b, n, n)))
    _jacobi_batch(G, W, _tolerance(m), MAX_SWEEPS)
    Us, Ss, Vs = [], [], []
    for i in range(b):
        f = _finish(G[i], W[i], m)
        if wide:
            f = _fix_signs(ThinSVD(f.V, f.S, f.U))
        Us.append(f.U)
        Ss.append(f.S)
        Vs.append(f.V)
    return np.stack(Us), np.stack(Ss), np.stack(Vs)


def truncate(svd, r):
    """Leading ``r`` singular triples ``(U_r, S_r, V_r)`` of a ThinSVD."""
    k = svd.S.shape[-1]
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= k:
        raise ValueError(f"rank must be an integer in [1, {k}], got {r!r}")
    return svd.U[..., :r], svd.S[..., :r], svd.V[..., :r]


def reconstruct(U_r, S_r, V_r):
    """The rank-<=r matrix ``U_r @ diag(S_r) @ V_r.T``."""
    U_r, S_r, V_r = (np.asarray(x, dtype=np.float64) for x in (U_r, S_r, V_r))
    if U_r.ndim != 2 or V_r.ndim != 2 or S_r.ndim != 1:
        raise ValueError("expected U_r (m, r), S_r (r,), V_r (n, r)")
    r = S_r.shape[0]
    if r == 0:
        raise ValueError("rank 0 reconstruction is not allowed")
    if U_r.shape[1] != r or V_r.shape[1] != r:
        raise ValueError(
            f"factor shapes {U_r.shape}, {S_r.shape}, {V_r.shape} do not conform"
        )
    return (U_r * S_r) @ V_r.T
