"""Dense displacement fields: warping, label resampling and bending energy.

A DDF ``d`` has shape (nx, ny, nz, 3) in voxel units and acts as
``warped(x) = moving(x + d(x))``. Sampling outside the moving grid clamps
to the border.
"""

import numba
import numpy as np

from ._validation import ShapeMismatchError, as_array, check_ddf, check_volume

# reassociation lets the stencil loops vectorize; NaN/inf semantics are kept
_FAST = {"reassoc", "contract"}


@numba.njit(cache=True, inline="always")
def _axis(x, n):
    # clamp a coordinate; returns (lower index, fraction, inside flag)
    inside = True
    if x < 0.0:
        x = 0.0
        inside = False
    elif x > n - 1:
        x = n - 1.0
        inside = False
    if n == 1:
        return 0, 0.0, False
    i0 = int(np.floor(x))
    if i0 > n - 2:
        i0 = n - 2
    return i0, x - i0, inside


@numba.njit(cache=True, parallel=True)
def _sample(img, coords, with_grad):
    nx, ny, nz = img.shape
    m = coords.shape[0]
    out = np.empty(m)
    grad = np.zeros((m, 3)) if with_grad else np.zeros((0, 3))
    for p in numba.prange(m):
        i, tx, ix = _axis(coords[p, 0], nx)
        j, ty, iy = _axis(coords[p, 1], ny)
        k, tz, iz = _axis(coords[p, 2], nz)
        i1 = min(i + 1, nx - 1)
        j1 = min(j + 1, ny - 1)
        k1 = min(k + 1, nz - 1)
        c000 = img[i, j, k]
        c100 = img[i1, j, k]
        c010 = img[i, j1, k]
        c110 = img[i1, j1, k]
        c001 = img[i, j, k1]
        c101 = img[i1, j, k1]
        c011 = img[i, j1, k1]
        c111 = img[i1, j1, k1]
        # interpolate along x, then y, then z; the weighted form is exact at t = 0 and 1
        c00 = (1.0 - tx) * c000 + tx * c100
        c10 = (1.0 - tx) * c010 + tx * c110
        c01 = (1.0 - tx) * c001 + tx * c101
        c11 = (1.0 - tx) * c011 + tx * c111
        c0 = (1.0 - ty) * c00 + ty * c10
        c1 = (1.0 - ty) * c01 + ty * c11
        out[p] = (1.0 - tz) * c0 + tz * c1
        if with_grad:
            if ix:
                d00 = c100 - c000
                d10 = c110 - c010
                d01 = c101 - c001
                d11 = c111 - c011
                d0 = (1.0 - ty) * d00 + ty * d10
                d1 = (1.0 - ty) * d01 + ty * d11
                grad[p, 0] = d0 + tz * (d1 - d0)
            if iy:
                grad[p, 1] = (c10 - c00) + tz * ((c11 - c01) - (c10 - c00))
            if iz:
                grad[p, 2] = c1 - c0
    return out, grad


@numba.njit(cache=True, parallel=True)
def _warp_planar(img, f, with_grad):
    # img sampled at (i, j, k) + f[:, i, j, k] for a component-major field f
    nx, ny, nz = img.shape
    _, ox, oy, oz = f.shape
    out = np.empty((ox, oy, oz))
    grad = np.zeros((3, ox, oy, oz)) if with_grad else np.zeros((3, 0, 0, 0))
    for a in numba.prange(ox):
        for b in range(oy):
            for c in range(oz):
                i, tx, ix = _axis(a + f[0, a, b, c], nx)
                j, ty, iy = _axis(b + f[1, a, b, c], ny)
                k, tz, iz = _axis(c + f[2, a, b, c], nz)
                i1 = min(i + 1, nx - 1)
                j1 = min(j + 1, ny - 1)
                k1 = min(k + 1, nz - 1)
                c000 = img[i, j, k]
                c100 = img[i1, j, k]
                c010 = img[i, j1, k]
                c110 = img[i1, j1, k]
                c001 = img[i, j, k1]
                c101 = img[i1, j, k1]
                c011 = img[i, j1, k1]
                c111 = img[i1, j1, k1]
                c00 = (1.0 - tx) * c000 + tx * c100
                c10 = (1.0 - tx) * c010 + tx * c110
                c01 = (1.0 - tx) * c001 + tx * c101
                c11 = (1.0 - tx) * c011 + tx * c111
                c0 = (1.0 - ty) * c00 + ty * c10
                c1 = (1.0 - ty) * c01 + ty * c11
                out[a, b, c] = (1.0 - tz) * c0 + tz * c1
                if with_grad:
                    if ix:
                        d00 = c100 - c000
                        d10 = c110 - c010
                        d01 = c101 - c001
                        d11 = c111 - c011
                        d0 = (1.0 - ty) * d00 + ty * d10
                        d1 = (1.0 - ty) * d01 + ty * d11
                        grad[0, a, b, c] = d0 + tz * (d1 - d0)
                    if iy:
                        grad[1, a, b, c] = (c10 - c00) + tz * ((c11 - c01) - (c10 - c00))
                    if iz:
                        grad[2, a, b, c] = c1 - c0
    return out, grad


def warp_planar(img, f, with_grad=False):
    """Warp with a component-major field (3, nx, ny, nz); optionally the
    interpolant derivative, also component-major."""
    out, grad = _warp_planar(
        np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(f, dtype=np.float64), with_grad
    )
    return (out, grad) if with_grad else out


def identity_grid(dims):
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def sample_trilinear(img, coords, with_grad=False):
    """Trilinear samples of ``img`` at absolute voxel coordinates (..., 3).

    With ``with_grad`` also returns the derivative of the interpolant with
    respect to each coordinate (zero along an axis where the point was
    clamped).
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    shape = coords.shape[:-1]
    flat = np.ascontiguousarray(coords.reshape(-1, 3))
    vals, grad = _sample(img, flat, with_grad)
    if with_grad:
        return vals.reshape(shape), grad.reshape(shape + (3,))
    return vals.reshape(shape)


def warp_trilinear(moving, ddf):
    """Resample ``moving`` at ``x + d(x)`` on the DDF grid."""
    img = check_volume(moving, "moving")
    d = check_ddf(ddf)
    return sample_trilinear(img, identity_grid(d.shape[:3]) + d)


def warp_with_derivative(moving, ddf):
    """Warped image and the interpolant's spatial derivative at each sample."""
    img = check_volume(moving, "moving")
    d = check_ddf(ddf)
    return sample_trilinear(img, identity_grid(d.shape[:3]) + d, with_grad=True)


def warp_gradient(moving, ddf, upstream):
    """Chain rule through the warp: dL/dd given dL/dwarped.

    Returns ``upstream(x) * grad(moving)(x + d(x))`` with the gradient of the
    trilinear interpolant, shape (nx, ny, nz, 3).
    """
    d = check_ddf(ddf)
    up = as_array(upstream)
    if up.shape != d.shape[:3]:
        raise ShapeMismatchError(f"upstream shape {up.shape} != ddf grid {d.shape[:3]}")
    _, dwarp = warp_with_derivative(moving, d)
    return up[..., None] * dwarp


def warp_labels_nn(labels, ddf):
    """Nearest-neighbour label resampling at ``round(x + d(x))``, clamped."""
    lab = np.asarray(as_array(labels, dtype=None))
    d = check_ddf(ddf)
    pos = np.floor(identity_grid(d.shape[:3]) + d + 0.5).astype(np.int64)
    for a in range(3):
        np.clip(pos[..., a], 0, lab.shape[a] - 1, out=pos[..., a])
    return lab[pos[..., 0], pos[..., 1], pos[..., 2]]


# ---------------------------------------------------------------------------
# bending energy
#
# Second derivatives use central differences on interior voxels only, where
# the full 3x3x3 stencil is available. That keeps affine fields exactly in
# the null space of the energy. Kernels work on component-major fields
# (3, nx, ny, nz).


@numba.njit(cache=True, parallel=True, fastmath=_FAST)
def _stencils(f, R):
    # responses of the xx, yy, zz, xy, xz, yz stencils at interior voxels,
    # written into R (nc, 6, nx+2, ny+2, nz+2) whose outer two rings stay zero
    # so the adjoint needs no bounds checks; returns per-slab weighted sums
    nc, nx, ny, nz = f.shape
    partial = np.zeros(nc * (nx - 2))
    for ci in numba.prange(nc * (nx - 2)):
        c = ci // (nx - 2)
        i = ci % (nx - 2) + 1
        acc = 0.0
        for j in range(1, ny - 1):
            for k in range(1, nz - 1):
                ctr = 2.0 * f[c, i, j, k]
                rxx = f[c, i + 1, j, k] - ctr + f[c, i - 1, j, k]
                ryy = f[c, i, j + 1, k] - ctr + f[c, i, j - 1, k]
                rzz = f[c, i, j, k + 1] - ctr + f[c, i, j, k - 1]
                rxy = 0.25 * (
                    f[c, i + 1, j + 1, k] - f[c, i + 1, j - 1, k]
                    - f[c, i - 1, j + 1, k] + f[c, i - 1, j - 1, k]
                )
                rxz = 0.25 * (
                    f[c, i + 1, j, k + 1] - f[c, i + 1, j, k - 1]
                    - f[c, i - 1, j, k + 1] + f[c, i - 1, j, k - 1]
                )
                ryz = 0.25 * (
                    f[c, i, j + 1, k + 1] - f[c, i, j + 1, k - 1]
                    - f[c, i, j - 1, k + 1] + f[c, i, j - 1, k - 1]
                )
                R[c, 0, i + 1, j + 1, k + 1] = rxx
                R[c, 1, i + 1, j + 1, k + 1] = ryy
                R[c, 2, i + 1, j + 1, k + 1] = rzz
                R[c, 3, i + 1, j + 1, k + 1] = rxy
                R[c, 4, i + 1, j + 1, k + 1] = rxz
                R[c, 5, i + 1, j + 1, k + 1] = ryz
                acc += rxx * rxx + ryy * ryy + rzz * rzz + 2.0 * (rxy * rxy + rxz * rxz + ryz * ryz)
        partial[ci] = acc
    return partial


@numba.njit(cache=True, parallel=True, fastmath=_FAST)
def _adjoint(R, scale, g, accumulate):
    # each stencil is symmetric under o -> -o, so its adjoint is the same
    # stencil applied to the zero-padded responses; cross terms carry weight 2
    nc = R.shape[0]
    nx, ny, nz = R.shape[2] - 2, R.shape[3] - 2, R.shape[4] - 2
    for ci in numba.prange(nc * nx):
        c = ci // nx
        i = ci % nx + 1
        for j in range(1, ny + 1):
            for k in range(1, nz + 1):
                acc = (
                    R[c, 0, i + 1, j, k] - 2.0 * R[c, 0, i, j, k] + R[c, 0, i - 1, j, k]
                    + R[c, 1, i, j + 1, k] - 2.0 * R[c, 1, i, j, k] + R[c, 1, i, j - 1, k]
                    + R[c, 2, i, j, k + 1] - 2.0 * R[c, 2, i, j, k] + R[c, 2, i, j, k - 1]
                )
                acc += 0.5 * (
                    R[c, 3, i + 1, j + 1, k] - R[c, 3, i + 1, j - 1, k]
                    - R[c, 3, i - 1, j + 1, k] + R[c, 3, i - 1, j - 1, k]
                )
                acc += 0.5 * (
                    R[c, 4, i + 1, j, k + 1] - R[c, 4, i + 1, j, k - 1]
                    - R[c, 4, i - 1, j, k + 1] + R[c, 4, i - 1, j, k - 1]
                )
                acc += 0.5 * (
                    R[c, 5, i, j + 1, k + 1] - R[c, 5, i, j + 1, k - 1]
                    - R[c, 5, i, j - 1, k + 1] + R[c, 5, i, j - 1, k - 1]
                )
                if accumulate:
                    g[c, i - 1, j - 1, k - 1] += scale * acc
                else:
                    g[c, i - 1, j - 1, k - 1] = scale * acc


def _normaliser(shape):
    nx, ny, nz = shape
    return 3.0 * (nx - 2) * (ny - 2) * (nz - 2)


def stencil_workspace(shape, dtype=np.float64):
    """Zeroed scratch buffer for :func:`bending_energy_planar`; reusable."""
    nx, ny, nz = shape
    return np.zeros((3, 6, nx + 2, ny + 2, nz + 2), dtype=dtype)


def bending_energy_planar(f, return_grad=False, workspace=None, weight=1.0, out=None):
    """Bending energy of a component-major field ``f`` of shape (3, nx, ny, nz).

    ``workspace`` (from :func:`stencil_workspace`) avoids reallocating the
    stencil buffer on every call inside an optimization loop. With ``out``
    given, ``weight`` times the gradient is added to it in place and ``out``
    is returned as the gradient.
    """
    if min(f.shape[1:]) < 3:
        raise ValueError(f"bending energy needs >= 3 voxels per axis, got {f.shape[1:]}")
    f = np.ascontiguousarray(f)
    R = workspace if workspace is not None else stencil_workspace(f.shape[1:], f.dtype)
    partial = _stencils(f, R)
    norm = _normaliser(f.shape[1:])
    energy = float(partial.sum()) / norm
    if not return_grad:
        return energy
    if out is None:
        g = np.empty(f.shape, dtype=R.dtype)
        _adjoint(R, 2.0 * weight / norm, g, False)
        return energy, g
    if out.shape != f.shape or not out.flags.c_contiguous:
        raise ValueError("out must be a C-contiguous array shaped like the field")
    _adjoint(R, 2.0 * weight / norm, out, True)
    return energy, out


def bending_energy(ddf, return_grad=False):
    """Mean bending energy of a displacement field.

    Averages ``f_xx^2 + f_yy^2 + f_zz^2 + 2 f_xy^2 + 2 f_xz^2 + 2 f_yz^2``
    over interior voxels and the three components. With ``return_grad``
    the exact gradient of this discrete energy is returned as well.
    """
    d = check_ddf(ddf)
    if min(d.shape[:3]) < 3:
        raise ValueError(f"bending energy needs >= 3 voxels per axis, got {d.shape[:3]}")
    out = bending_energy_planar(to_planar(d), return_grad)
    if not return_grad:
        return out
    return out[0], from_planar(out[1])


def bending_energy_grad(ddf):
    return bending_energy(ddf, return_grad=True)[1]


def to_planar(d):
    return np.ascontiguousarray(np.moveaxis(d, -1, 0))


def from_planar(f):
    return np.ascontiguousarray(np.moveaxis(f, 0, -1))


def jacobian_determinant(ddf):
    """Voxelwise ``det(I + grad d)``; central differences inside, one-sided at edges."""
    d = check_ddf(ddf)
    if min(d.shape[:3]) < 2:
        raise ValueError("Jacobian needs >= 2 voxels per axis")
    J = np.empty(d.shape[:3] + (3, 3))
    for c in range(3):
        grads = np.gradient(d[..., c], axis=(0, 1, 2))
        for a in range(3):
            J[..., c, a] = grads[a]
    J += np.eye(3)
    return np.linalg.det(J)


def jacobian_determinant_min(ddf):
    return float(jacobian_determinant(ddf).min())


def upsample_ddf(ddf, shape):
    """Carry a coarse DDF (from 2x mean pooling) to the finer grid ``shape``.

    Fine voxel x sits at coarse coordinate (x - 0.5) / 2; displacements are
    doubled to express them in fine voxels.
    """
    d = check_ddf(ddf)
    coords = (identity_grid(shape) - 0.5) / 2.0
    out = np.empty(tuple(shape) + (3,))
    for c in range(3):
        out[..., c] = 2.0 * sample_trilinear(d[..., c], coords)
    return out


def downsample(img):
    """2x mean pooling; odd trailing planes are replicated before pooling."""
    a = np.asarray(img, dtype=np.float64)
    pad = [(0, n % 2) for n in a.shape]
    if any(p[1] for p in pad):
        a = np.pad(a, pad, mode="edge")
    nx, ny, nz = a.shape
    return a.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))
