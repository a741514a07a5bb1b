"""Intensity similarity losses used as registration baselines.

NCC here is global (one correlation over the whole volume) and the loss is
``1 - NCC``, so it lies in [0, 2].
"""

import numpy as np

from ._validation import as_array, check_same_shape


def _pair(warped, fixed):
    w = as_array(warped)
    f = as_array(fixed)
    check_same_shape(w, f, ("warped", "fixed"))
    return w, f


def mse_loss(warped, fixed):
    w, f = _pair(warped, fixed)
    diff = w - f
    return float(np.vdot(diff, diff) / diff.size)


def mse_grad(warped, fixed):
    """Gradient of :func:`mse_loss` with respect to the warped image."""
    w, f = _pair(warped, fixed)
    return (2.0 / w.size) * (w - f)


def mse(warped, fixed):
    """``(loss, gradient)`` in one pass."""
    w, f = _pair(warped, fixed)
    diff = w - f
    return float(np.vdot(diff, diff) / diff.size), (2.0 / w.size) * diff


def _centered(w, f):
    a = w - w.mean()
    b = f - f.mean()
    A = float(np.vdot(a, a))
    B = float(np.vdot(b, b))
    if A == 0.0 or B == 0.0:
        which = "warped" if A == 0.0 else "fixed"
        raise ValueError(f"NCC is undefined: {which} image has zero variance")
    return a, b, A, B, float(np.vdot(a, b))


def ncc(warped, fixed):
    """``(1 - NCC, gradient)`` for global normalized cross correlation."""
    w, f = _pair(warped, fixed)
    a, b, A, B, C = _centered(w, f)
    root = np.sqrt(A * B)
    corr = C / root
    grad = -(b / root - (C / (A * root)) * a)
    return float(1.0 - corr), grad


def ncc_loss(warped, fixed):
    w, f = _pair(warped, fixed)
    _, _, A, B, C = _centered(w, f)
    return float(1.0 - C / np.sqrt(A * B))


def ncc_grad(warped, fixed):
    return ncc(warped, fixed)[1]
