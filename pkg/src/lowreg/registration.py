"""Per-pair deformable registration by direct optimization of a dense DDF.

The objective is ``similarity(moving o T, fixed) + lam * bending_energy(T)``
with the similarity chosen from the low-rank loss (``"lrr"``), ``"mse"`` or
``"ncc"``. Parameters are the voxel displacements themselves, updated with
Adam under a triangular cyclic learning rate, coarse to fine.
"""

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import NumericalAbort, ShapeMismatchError, check_ddf, check_volume
from .deform import (
    bending_energy_planar,
    downsample,
    from_planar,
    jacobian_determinant_min,
    stencil_workspace,
    to_planar,
    upsample_ddf,
    warp_labels_nn,
    warp_planar,
    warp_trilinear,
)
from .lowrank import LowRankProjector, _axis_index
from .optim import AdamState, Trace, adam_step, cyclic_lr
from .similarity import mse, ncc

LOSSES = ("lrr", "mse", "ncc")


@dataclass(frozen=True)
class RegConfig:
    """Optimization settings for :func:`register`.

    ``lr_min``/``lr_max`` are step sizes in voxels per Adam update, since the
    optimized parameters are the displacements themselves.
    """

    loss: str = "lrr"
    rank: int = 48
    lam: float = 0.5
    axis: str = "z"
    max_steps: int = 400
    lr_min: float = 5e-3
    lr_max: float = 5e-2
    cycle_length: int = 100
    levels: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol: float = 1e-6
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        _axis_index(self.axis)

    def to_dict(self):
        return asdict(self)


@dataclass
class RegResult:
    ddf: np.ndarray
    trace: Trace
    steps_per_level: list
    duration: float
    min_jacobian: float
    final_loss: tuple = (np.nan, np.nan, np.nan)
    config: Optional[RegConfig] = None
    converged: list = field(default_factory=list)


def level_rank(rank, level, levels, slice_shape):
    """Rank used at pyramid ``level`` (0 = coarsest): halved per coarser level."""
    r = max(1, rank // (2 ** (levels - 1 - level)))
    return min(r, min(slice_shape))


def _slice_shape(shape, axis):
    ax = _axis_index(axis)
    return tuple(n for i, n in enumerate(shape) if i != ax)


class _Similarity:
    """Similarity term bound to one (possibly downsampled) fixed image."""

    def __init__(self, kind, fixed, rank=None, axis="z", projector=None):
        self.kind = kind
        self.fixed = fixed
        self.projector = projector
        if kind == "lrr" and projector is None:
            self.projector = LowRankProjector(rank=rank, axis=axis).fit(fixed)
        if kind == "lrr" and self.projector.shape_ != fixed.shape:
            raise ShapeMismatchError("projector was built for a different fixed image shape")

    def __call__(self, warped):
        if self.kind == "lrr":
            return self.projector.loss_and_grad(warped)
        if self.kind == "mse":
            return mse(warped, self.fixed)
        return ncc(warped, self.fixed)


def objective(warped, fixed, ddf, cfg, projector=None):
    """``(total, similarity, regularization)`` of the registration objective.

    ``projector`` must be fitted on ``fixed`` at ``cfg.rank`` when
    ``cfg.loss == "lrr"``; one is built if omitted.
    """
    w = check_volume(warped, "warped")
    f = check_volume(fixed, "fixed")
    d = check_ddf(ddf, f.shape)
    if cfg.loss == "lrr" and projector is not None:
        if projector.shape_ != f.shape or projector.rank != cfg.rank:
            raise ShapeMismatchError("projector does not match the fixed image / rank")
        if not np.allclose(projector.transform(f), _diag_stack(projector.S_), atol=1e-6):
            raise ValueError("projector was not built from this fixed image")
    sim_fn = _Similarity(cfg.loss, f, cfg.rank, cfg.axis, projector)
    sim = sim_fn(w)[0]
    reg = bending_energy_planar(to_planar(d)) if cfg.lam > 0 else 0.0
    return sim + cfg.lam * reg, sim, reg


def objective_grad(moving, fixed, ddf, cfg, projector=None):
    """Objective value and its gradient with respect to the DDF, shape (..., 3)."""
    m = check_volume(moving, "moving")
    f = check_volume(fixed, "fixed")
    d = check_ddf(ddf, f.shape)
    sim_fn = _Similarity(cfg.loss, f, cfg.rank, cfg.axis, projector)
    planar = to_planar(d)
    total, sim, reg, grad = _evaluate(m, planar, sim_fn, cfg.lam, None)
    return (total, sim, reg), from_planar(grad)


def _diag_stack(S):
    n, r = S.shape
    out = np.zeros((n, r, r))
    idx = np.arange(r)
    out[:, idx, idx] = S
    return out


def _evaluate(moving, f, sim_fn, lam, workspace):
    warped, dwarp = warp_planar(moving, f, with_grad=True)
    sim, gw = sim_fn(warped)
    dwarp *= gw[None]
    if lam > 0:
        reg, _ = bending_energy_planar(f, True, workspace, weight=lam, out=dwarp)
    else:
        reg = 0.0
    return sim + lam * reg, sim, reg, dwarp


def _pyramid(img, levels):
    out = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out[::-1]


def register(moving, fixed, cfg=None):
    """Register ``moving`` onto ``fixed``; returns a :class:`RegResult`.

    Raises :class:`NumericalAbort` (carrying the last field) if the loss
    becomes non-finite.
    """
    cfg = cfg or RegConfig()
    m = check_volume(moving, "moving")
    f = check_volume(fixed, "fixed")
    if m.shape != f.shape:
        raise ShapeMismatchError(f"moving shape {m.shape} != fixed shape {f.shape}")
    t0 = time.perf_counter()
    movs = _pyramid(m, cfg.levels)
    fixs = _pyramid(f, cfg.levels)
    trace = Trace()
    steps_per_level, converged = [], []
    field_ = None
    gstep = 0
    for level, (mv, fx) in enumerate(zip(movs, fixs)):
        if min(fx.shape) < 3:
            raise ValueError(f"pyramid level {level} is too small: {fx.shape}")
        if field_ is None:
            field_ = np.zeros((3,) + fx.shape)
        else:
            field_ = to_planar(upsample_ddf(from_planar(field_), fx.shape))
        rank = level_rank(cfg.rank, level, cfg.levels, _slice_shape(fx.shape, cfg.axis))
        sim_fn = _Similarity(cfg.loss, fx, rank, cfg.axis)
        state = AdamState.zeros_like(field_, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        ws = stencil_workspace(fx.shape) if cfg.lam > 0 else None
        history = []
        done = False
        steps = 0
        for step in range(cfg.max_steps):
            lr = cyclic_lr(step, cfg.lr_min, cfg.lr_max, cfg.cycle_length)
            total, sim, reg, grad = _evaluate(mv, field_, sim_fn, cfg.lam, ws)
            if not (np.isfinite(total) and np.all(np.isfinite(grad))):
                raise NumericalAbort(
                    f"non-finite loss at level {level}, step {step}",
                    state={"level": level, "step": step, "ddf": from_planar(field_), "trace": trace},
                )
            trace.append(gstep, level, lr, total, sim, reg)
            history.append(total)
            gstep += 1
            steps += 1
            if len(history) > cfg.patience:
                ref = history[-1 - cfg.patience]
                if abs(total - ref) < cfg.tol * max(abs(ref), 1e-300):
                    done = True
                    break
            adam_step(field_, state, grad, lr)
        steps_per_level.append(steps)
        converged.append(done)
    ddf = from_planar(field_)
    final = _evaluate(movs[-1], field_, sim_fn, cfg.lam, ws)[:3]
    return RegResult(
        ddf=ddf,
        trace=trace,
        steps_per_level=steps_per_level,
        duration=time.perf_counter() - t0,
        min_jacobian=jacobian_determinant_min(ddf),
        final_loss=tuple(float(x) for x in final),
        config=cfg,
        converged=converged,
    )


class DeformableRegistration(BaseEstimator):
    """Estimator wrapper around :func:`register`.

    ``fit(moving, fixed)`` optimizes a displacement field; ``transform``
    warps any image on the moving grid with it and ``transform_labels``
    does the same for label maps (nearest neighbour).

    Parameters mirror :class:`RegConfig`; ``lam`` is the weight of the
    bending-energy regularizer.
    """

    def __init__(self, loss="lrr", rank=48, lam=0.5, axis="z", max_steps=400,
                 lr_min=5e-3, lr_max=5e-2, cycle_length=100, levels=2,
                 beta1=0.9, beta2=0.999, eps=1e-8, tol=1e-6, patience=20, seed=0):
        self.loss = loss
        self.rank = rank
        self.lam = lam
        self.axis = axis
        self.max_steps = max_steps
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.cycle_length = cycle_length
        self.levels = levels
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.tol = tol
        self.patience = patience
        self.seed = seed

    def get_config(self):
        return RegConfig(**self.get_params())

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg.to_dict())

    def fit(self, X, y):
        """Register moving image ``X`` onto fixed image ``y``."""
        self.result_ = register(X, y, self.get_config())
        self.ddf_ = self.result_.ddf
        return self

    def transform(self, X):
        check_is_fitted(self, "ddf_")
        return warp_trilinear(X, self.ddf_)

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)

    def transform_labels(self, labels):
        check_is_fitted(self, "ddf_")
        return warp_labels_nn(labels, self.ddf_)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
