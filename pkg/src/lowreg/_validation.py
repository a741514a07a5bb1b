"""Input validation helpers shared by the public API."""

import numpy as np


class ShapeMismatchError(ValueError):
    """Two arrays that must share a grid do not."""


class NumericalAbort(FloatingPointError):
    """An optimization produced a non-finite value and was stopped."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


def as_array(v, dtype=np.float64):
    """Return the voxel array behind ``v`` (a Volume-like object or ndarray)."""
    data = getattr(v, "data", v)
    return np.asarray(data, dtype=dtype)


def check_volume(v, name="volume", ndim=3, finite=True):
    arr = as_array(v)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_ddf(d, shape=None, name="ddf"):
    arr = as_array(d)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (nx, ny, nz, 3), got {arr.shape}")
    if shape is not None and arr.shape[:3] != tuple(shape):
        raise ShapeMismatchError(f"{name} grid {arr.shape[:3]} does not match {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite displacements")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}")
