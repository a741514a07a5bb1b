"""Volumes, label maps, intensity normalization, noise and synthetic phantoms.

Arrays are indexed ``[x, y, z]``. On disk the payload is written with x
varying fastest (Fortran order), see :mod:`lowreg.io`.

Random numbers come from numpy's PCG64 bit generator; Gaussian samples use
its ziggurat ``standard_normal``. Outputs are bit-reproducible for a given
seed within this implementation.
"""

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from ._validation import as_array

CARDIAC = "cardiac"
ABDOMINAL = "abdominal"

# structure names per phantom kind, keyed by label id
STRUCTURES = {
    CARDIAC: {1: "MYO", 2: "LV"},
    ABDOMINAL: {1: "RK", 2: "LK"},
}


@dataclass
class Volume:
    """Scalar intensity field on a voxel grid, spacing in mm per voxel."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelMap(Volume):
    """Integer labels (0 = background) aligned to a Volume."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.size and (self.data.min() < 0 or self.data.max() > 255):
            raise ValueError("labels must be integers in [0, 255]")
        self.data = self.data.astype(np.uint8)

    def labels(self):
        """Sorted foreground label ids present (background 0 excluded)."""
        return sorted(int(v) for v in np.unique(self.data) if v != 0)


@dataclass
class DDF:
    """Dense displacement field in voxel units: ``warped(x) = moving(x + d(x))``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"DDF data must have shape (nx, ny, nz, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("DDF contains non-finite displacements")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape[:3]


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "awgn"
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("awgn", "rician"):
            raise ValueError(f"noise kind must be 'awgn' or 'rician', got {self.kind!r}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and ground-truth warp of a synthetic labeled phantom.

    ``centers`` and ``radii`` hold one (x, y, z) triple per structure, in
    voxels. For the cardiac kind the structures are the inner (LV) and
    outer (epicardial) ellipsoids sharing ``centers[0]``; MYO is the shell
    between them. For the abdominal kind they are the two kidneys.
    ``magnitude`` is the peak ground-truth displacement in voxels.
    ``texture`` is the amplitude of a smooth analytic intensity pattern
    inside the body (0 disables it); without it most of the field is
    unidentifiable from intensities.
    """

    dims: tuple = (96, 96, 96)
    kind: str = CARDIAC
    centers: Optional[tuple] = None
    radii: Optional[tuple] = None
    magnitude: float = 3.0
    texture: float = 0.05
    n_bumps: int = 6
    bump_width: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRUCTURES:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"phantom dims must be three values >= 8, got {self.dims}")
        if self.magnitude < 0:
            raise ValueError("deformation magnitude must be >= 0")
        if self.texture < 0:
            raise ValueError("texture amplitude must be >= 0")

    def geometry(self):
        """Resolved (centers, radii) arrays, filling in size-relative defaults."""
        d = np.asarray(self.dims, dtype=np.float64)
        mid = (d - 1) / 2
        if self.kind == CARDIAC:
            centers = [mid + d * [0.02, -0.02, 0.0]] * 2
            radii = [d * [0.15, 0.13, 0.17], d * [0.22, 0.2, 0.24]]
        else:
            centers = [mid + d * [-0.22, 0.04, 0.0], mid + d * [0.22, 0.02, 0.02]]
            radii = [d * [0.1, 0.13, 0.17], d * [0.1, 0.12, 0.16]]
        if self.centers is not None:
            centers = self.centers
        if self.radii is not None:
            radii = self.radii
        return np.asarray(centers, dtype=np.float64), np.asarray(radii, dtype=np.float64)


def normalize_intensity(v):
    """Min-max scale a volume to [0, 1]; a constant volume maps to zeros."""
    arr = as_array(v)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty volume")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        out = np.zeros_like(arr, dtype=np.float64)
    else:
        out = (arr - lo) / (hi - lo)
        # guard against rounding just outside the unit interval
        np.clip(out, 0.0, 1.0, out=out)
    return _rewrap(v, out)


def _rewrap(v, out):
    if isinstance(v, Volume):
        return Volume(out, v.spacing)
    return out


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def add_awgn(v, spec):
    """Add iid Normal(0, sigma^2) noise; values are not clipped."""
    if spec.kind != "awgn":
        raise ValueError(f"add_awgn needs an 'awgn' NoiseSpec, got {spec.kind!r}")
    arr = as_array(v)
    if spec.sigma == 0:
        return _rewrap(v, arr.copy())
    noise = _rng(spec.seed).standard_normal(arr.shape)
    return _rewrap(v, arr + spec.sigma * noise)


def add_rician(v, spec):
    """Rician magnitude noise ``sqrt((v + a)^2 + b^2)``, a, b iid Normal(0, sigma^2)."""
    if spec.kind != "rician":
        raise ValueError(f"add_rician needs a 'rician' NoiseSpec, got {spec.kind!r}")
    arr = as_array(v)
    if arr.size and arr.min() < 0:
        raise ValueError("Rician noise requires non-negative intensities")
    if spec.sigma == 0:
        return _rewrap(v, np.abs(arr))
    rng = _rng(spec.seed)
    a = rng.standard_normal(arr.shape) * spec.sigma
    b = rng.standard_normal(arr.shape) * spec.sigma
    return _rewrap(v, np.sqrt((arr + a) ** 2 + b**2))


def add_noise(v, spec):
    return add_awgn(v, spec) if spec.kind == "awgn" else add_rician(v, spec)


# ---------------------------------------------------------------------------
# phantoms

@dataclass
class Phantom:
    moving: Volume
    fixed: Volume
    moving_labels: LabelMap
    fixed_labels: LabelMap
    gt_ddf: DDF
    structures: dict = field(default_factory=dict)


def _inside(points, center, radii):
    q = (points - center) / radii
    return np.einsum("...i,...i->...", q, q) <= 1.0


def _render(points, spec):
    """Intensity and labels of the analytic phantom at continuous ``points``."""
    centers, radii = spec.geometry()
    d = np.asarray(spec.dims, dtype=np.float64)
    mid = (d - 1) / 2
    img = np.zeros(points.shape[:-1])
    lab = np.zeros(points.shape[:-1], dtype=np.uint8)
    # torso: elliptic cylinder along z, cut by the field of view
    q = (points[..., :2] - mid[:2]) / (d[:2] * [0.47, 0.42])
    body = np.einsum("...i,...i->...", q, q) <= 1.0
    img[body] = 0.25
    if spec.kind == CARDIAC:
        # right-ventricle-like blob and an aorta-like tube add texture
        rv = _inside(points, centers[0] + d * [-0.2, 0.16, 0.0], d * [0.11, 0.09, 0.14])
        img[rv & body] = 0.7
        tube = _inside(points, centers[0] + d * [0.16, 0.22, 0.0], d * [0.05, 0.05, 0.3])
        img[tube & body] = 0.85
        outer = _inside(points, centers[1], radii[1])
        inner = _inside(points, centers[0], radii[0])
        img[outer] = 0.5
        lab[outer] = 1
        img[inner] = 0.95
        lab[inner] = 2
    else:
        liver = _inside(points, mid + d * [-0.08, -0.2, 0.05], d * [0.22, 0.12, 0.2])
        img[liver & body] = 0.55
        spine = _inside(points, mid + d * [0.0, 0.26, 0.0], d * [0.06, 0.06, 0.4])
        img[spine & body] = 1.0
        for label, (c, r) in enumerate(zip(centers, radii), start=1):
            kidney = _inside(points, c, r)
            img[kidney] = 0.8
            lab[kidney] = label
            pelvis = _inside(points, c, r * 0.35)
            img[pelvis] = 0.4
    if spec.texture > 0:
        img[body] += _texture(points[body], spec)
        np.clip(img, 0.0, 1.0, out=img)
    return img, lab


def _texture(points, spec, waves=8):
    # sum of plane cosines with wavelengths between 1/12 and 1/5 of the
    # smallest dimension; analytic, so moving and fixed sample one pattern
    rng = np.random.default_rng([spec.seed, 7])
    short = float(min(spec.dims))
    direction = rng.standard_normal((waves, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    wavelength = rng.uniform(short / 12, short / 5, waves)
    phase = rng.uniform(0, 2 * np.pi, waves)
    k = 2 * np.pi * direction / wavelength[:, None]
    return (spec.texture / np.sqrt(waves / 2)) * np.cos(points @ k.T + phase).sum(axis=-1)


def _bumps(spec):
    rng = _rng(spec.seed)
    d = np.asarray(spec.dims, dtype=np.float64)
    width = spec.bump_width or float(d.min()) / 6.0
    centers, radii = spec.geometry()
    span = radii.max(axis=0) * 1.2
    lo = np.maximum(centers.min(axis=0) - span, 0)
    hi = np.minimum(centers.max(axis=0) + span, d - 1)
    bump_centers = lo + rng.random((spec.n_bumps, 3)) * (hi - lo)
    amps = rng.standard_normal((spec.n_bumps, 3))
    return bump_centers, amps, width


@numba.njit(cache=True)
def _bump_kernel(pts, centers, amps, inv2w2, out):
    for i in range(pts.shape[0]):
        ox = oy = oz = 0.0
        for b in range(centers.shape[0]):
            dx = pts[i, 0] - centers[b, 0]
            dy = pts[i, 1] - centers[b, 1]
            dz = pts[i, 2] - centers[b, 2]
            e = np.exp(-(dx * dx + dy * dy + dz * dz) * inv2w2)
            ox += e * amps[b, 0]
            oy += e * amps[b, 1]
            oz += e * amps[b, 2]
        out[i, 0] = ox
        out[i, 1] = oy
        out[i, 2] = oz


def _bump_field(points, bump_centers, amps, width):
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty_like(pts)
    _bump_kernel(pts, np.ascontiguousarray(bump_centers, dtype=np.float64),
                 np.ascontiguousarray(amps, dtype=np.float64), 1.0 / (2 * width**2), out)
    return out.reshape(points.shape)


def _grid(dims):
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def generate_phantom(spec):
    """Render a fixed/moving phantom pair with labels and ground-truth DDF.

    The ground-truth field ``g`` is a sum of Gaussian displacement bumps
    scaled so that ``max |g| == spec.magnitude``. The moving image is the
    phantom seen through the inverse map, so that ``moving(x + g(x))``
    equals ``fixed(x)``; ``g`` is therefore directly comparable to an
    estimated DDF.
    """
    centers, radii = spec.geometry()
    d = np.asarray(spec.dims, dtype=np.float64)
    margin = spec.magnitude
    if np.any(centers - radii - margin < 0) or np.any(centers + radii + margin > d - 1):
        raise ValueError(
            "phantom geometry plus deformation margin exceeds the volume bounds"
        )
    grid = _grid(spec.dims)
    fixed, fixed_lab = _render(grid, spec)
    if spec.magnitude == 0:
        gt = np.zeros(grid.shape)
        moving, moving_lab = fixed.copy(), fixed_lab.copy()
    else:
        bc, amps, width = _bumps(spec)
        raw = _bump_field(grid, bc, amps, width)
        peak = np.sqrt((raw**2).sum(-1)).max()
        amps = amps * (spec.magnitude / peak)
        gt = raw * (spec.magnitude / peak)
        # invert y = x + g(x) by fixed-point iteration x <- y - g(x)
        src = grid.copy()
        for _ in range(40):
            src = grid - _bump_field(src, bc, amps, width)
        moving, moving_lab = _render(src, spec)
    from .deform import jacobian_determinant_min

    if spec.magnitude > 0 and jacobian_determinant_min(gt) <= 0:
        raise ValueError("ground-truth deformation folds; lower the magnitude")
    return Phantom(
        moving=Volume(moving),
        fixed=Volume(fixed),
        moving_labels=LabelMap(moving_lab),
        fixed_labels=LabelMap(fixed_lab),
        gt_ddf=DDF(gt),
        structures=dict(STRUCTURES[spec.kind]),
    )
