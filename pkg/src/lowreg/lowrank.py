"""Low-rank similarity anchored to the fixed image's slice-wise SVD.

For every 2-D slice ``F`` of the fixed image (along one axis) the truncated
factors ``U_r, S_r, V_r`` are computed once. Any image slice ``W`` is then
mapped to the r x r matrix ``U_r.T @ W @ V_r``; the fixed slice maps to
``diag(S_r)`` exactly. The loss compares the two in that space, so its
gradient with respect to ``W`` is available in closed form.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ShapeMismatchError, as_array, check_volume
from .svd import thin_svd_batch

AXES = {"x": 0, "y": 1, "z": 2}


def _axis_index(axis):
    if isinstance(axis, str):
        try:
            return AXES[axis.lower()]
        except KeyError:
            raise ValueError(f"slice axis must be one of x, y, z; got {axis!r}") from None
    if axis in (0, 1, 2):
        return int(axis)
    raise ValueError(f"slice axis must be one of x, y, z; got {axis!r}")


class LowRankProjector(TransformerMixin, BaseEstimator):
    """Slice-wise projection onto the leading singular subspaces of a fixed image.

    Parameters
    ----------
    rank : int, default=48
        Number of singular triples kept per slice.
    axis : {'x', 'y', 'z'}, default='z'
        Axis along which the volume is cut into 2-D slices.

    Attributes
    ----------
    U_ : ndarray of shape (n_slices, h, rank)
    S_ : ndarray of shape (n_slices, rank)
    V_ : ndarray of shape (n_slices, w, rank)
    singular_values_ : ndarray of shape (n_slices, min(h, w))
        Full spectrum of every fixed-image slice.
    shape_ : tuple
        Shape of the fixed volume the projector was fitted on.
    """

    def __init__(self, rank=48, axis="z"):
        self.rank = rank
        self.axis = axis

    def fit(self, X, y=None):
        fixed = check_volume(X, "fixed")
        ax = _axis_index(self.axis)
        slices = np.moveaxis(fixed, ax, 0)
        h, w = slices.shape[1:]
        if not isinstance(self.rank, (int, np.integer)) or not 1 <= self.rank <= min(h, w):
            raise ValueError(
                f"rank must be an integer in [1, {min(h, w)}] for {h}x{w} slices, got {self.rank!r}"
            )
        U, S, V = thin_svd_batch(slices)
        r = int(self.rank)
        self.U_ = np.ascontiguousarray(U[..., :r])
        self.S_ = np.ascontiguousarray(S[..., :r])
        self.V_ = np.ascontiguousarray(V[..., :r])
        # transposed copies: batched matmul is only fast on contiguous operands
        self._Ut = np.ascontiguousarray(np.swapaxes(self.U_, 1, 2))
        self._Vt = np.ascontiguousarray(np.swapaxes(self.V_, 1, 2))
        self.singular_values_ = S
        self.shape_ = fixed.shape
        self.axis_ = ax
        return self

    def _slices(self, X, name="volume"):
        check_is_fitted(self, "U_")
        v = as_array(X)
        if v.shape != self.shape_:
            raise ShapeMismatchError(
                f"{name} shape {v.shape} != fixed image shape {self.shape_}"
            )
        return np.ascontiguousarray(np.moveaxis(v, self.axis_, 0))

    def transform(self, X):
        """Projected stack ``U_r.T @ slice @ V_r`` of shape (n_slices, rank, rank)."""
        s = self._slices(X)
        return np.matmul(self._Ut, np.matmul(s, self.V_))

    def inverse_transform(self, P):
        """Map an r x r stack back to full-size slices ``U_r @ P @ V_r.T``."""
        check_is_fitted(self, "U_")
        P = np.asarray(P, dtype=np.float64)
        r = self.S_.shape[1]
        if P.shape != (self.U_.shape[0], r, r):
            raise ShapeMismatchError(f"projection stack shape {P.shape} does not match projector")
        full = np.matmul(np.matmul(self.U_, P), self._Vt)
        return np.ascontiguousarray(np.moveaxis(full, 0, self.axis_))

    def residual(self, X):
        """Per-slice ``U_r.T W V_r - diag(S_r)``."""
        P = self.transform(X)
        idx = np.arange(P.shape[1])
        P[:, idx, idx] -= self.S_
        return P

    def loss(self, X, squared=True):
        """Mean over slices of the (squared) Frobenius norm of the residual."""
        E = self.residual(X)
        per_slice = np.einsum("sij,sij->s", E, E)
        if not squared:
            per_slice = np.sqrt(per_slice)
        return float(per_slice.sum() / per_slice.shape[0])

    def loss_and_grad(self, X):
        """Squared loss and its gradient with respect to the input volume."""
        E = self.residual(X)
        n = E.shape[0]
        loss = float(np.einsum("sij,sij->s", E, E).sum() / n)
        grad = self.inverse_transform(E) * (2.0 / n)
        return loss, grad

    def reconstruct(self, X):
        """Rank-<=r image ``U_r U_r.T W V_r V_r.T`` slice by slice."""
        return self.inverse_transform(self.transform(X))


def build_projector(fixed, r=48, axis="z"):
    return LowRankProjector(rank=r, axis=axis).fit(fixed)


def project(p, v):
    return p.transform(v)


def lrr_loss(p, warped, squared=True):
    return p.loss(warped, squared=squared)


def lrr_loss_grad(p, warped):
    return p.loss_and_grad(warped)[1]


def reconstruct_lowrank_image(p, v):
    return p.reconstruct(v)


def singular_spectra(p):
    """Full per-slice singular value spectra of the fixed image."""
    check_is_fitted(p, "singular_values_")
    return p.singular_values_.copy()
