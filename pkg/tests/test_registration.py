import numpy as np
import pytest
from conftest import assert_fd
from sklearn.base import clone

from lowreg._validation import NumericalAbort
from lowreg.deform import bending_energy, warp_labels_nn, warp_trilinear
from lowreg.evaluation import dice, endpoint_error
from lowreg.lowrank import build_projector
from lowreg.registration import (
    DeformableRegistration,
    RegConfig,
    level_rank,
    objective,
    objective_grad,
    register,
    with_overrides,
)
from lowreg.volume import PhantomSpec, generate_phantom

FAST = RegConfig(max_steps=60, rank=8, cycle_length=20)


def test_config_validation():
    for bad in (dict(loss="l1"), dict(rank=0), dict(lam=-1), dict(lr_min=1, lr_max=0.5),
                dict(levels=0), dict(max_steps=0), dict(axis="q")):
        with pytest.raises(ValueError):
            RegConfig(**bad)
    assert with_overrides(RegConfig(), rank=None, lam=2.0).lam == 2.0


def test_level_rank():
    assert level_rank(48, 1, 2, (96, 96)) == 48
    assert level_rank(48, 0, 2, (48, 48)) == 24
    assert level_rank(96, 0, 2, (48, 48)) == 48
    assert level_rank(1, 0, 3, (10, 10)) == 1
    assert level_rank(48, 0, 2, (20, 10)) == 10


def test_objective_trivia(small_phantom):
    f = small_phantom.fixed.data
    zero = np.zeros(f.shape + (3,))
    for loss in ("mse", "lrr"):
        cfg = RegConfig(loss=loss, rank=6)
        p = build_projector(f, 6) if loss == "lrr" else None
        total, sim, reg = objective(f, f, zero, cfg, p)
        assert abs(total) <= 1e-10 and reg == 0.0
    rng = np.random.default_rng(0)
    d = rng.uniform(-1, 1, f.shape + (3,))
    w = warp_trilinear(small_phantom.moving.data, d)
    cfg0 = RegConfig(loss="ncc", lam=0.0)
    total, sim, reg = objective(w, f, d, cfg0)
    assert total == sim


def test_objective_projector_mismatch(small_phantom):
    f = small_phantom.fixed.data
    zero = np.zeros(f.shape + (3,))
    with pytest.raises(ValueError):
        objective(f, f, zero, RegConfig(rank=6), build_projector(f, 5))
    with pytest.raises(ValueError):
        objective(f, f, zero, RegConfig(rank=6), build_projector(small_phantom.moving.data, 6))


@pytest.mark.parametrize("loss", ["lrr", "mse", "ncc"])
def test_objective_gradient_fd(small_phantom, rng, loss):
    m, f = small_phantom.moving.data, small_phantom.fixed.data
    cfg = RegConfig(loss=loss, rank=6, lam=0.5)
    p = build_projector(f, 6) if loss == "lrr" else None
    d = rng.uniform(-1.5, 1.5, f.shape + (3,))
    _, g = objective_grad(m, f, d, cfg, p)

    def fun(x):
        return objective(warp_trilinear(m, x), f, x, cfg, p)[0]

    assert_fd(fun, d, g, 30, 1e-4, 1e-3, rng)


def test_identical_pair_mse_stays_put(small_phantom):
    f = small_phantom.fixed.data
    res = register(f, f, with_overrides(FAST, loss="mse"))
    assert res.trace.loss_sim[-1] <= res.trace.loss_sim[0]
    assert bending_energy(res.ddf) == 0.0 and not res.ddf.any()


@pytest.mark.parametrize("loss", ["lrr", "ncc"])
def test_identical_pair_stays_near_identity(small_phantom, loss):
    # rounding-level gradients are rescaled by Adam, so the field jitters at
    # the scale of the learning rate instead of staying exactly zero
    f = small_phantom.fixed.data
    res = register(f, f, with_overrides(FAST, loss=loss))
    assert np.abs(res.ddf).max() < 0.1
    assert bending_energy(res.ddf) < 1e-4
    assert res.trace.loss_sim[-1] < 1e-5


def test_trace_consistency(small_phantom):
    res = register(small_phantom.moving.data, small_phantom.fixed.data, FAST)
    tr = res.trace
    assert len(tr) == sum(res.steps_per_level)
    assert len(res.steps_per_level) == FAST.levels
    assert tr.step == list(range(len(tr)))
    assert all(np.isfinite(tr.loss_total))
    np.testing.assert_allclose(tr.loss_total, np.add(tr.loss_sim, FAST.lam * np.asarray(tr.loss_reg)))
    # the schedule reaches both ends of the band within every full cycle
    lv = np.asarray(tr.level)
    lr = np.asarray(tr.lr)[lv == 1]
    assert lr[:FAST.cycle_length].min() == pytest.approx(FAST.lr_min)
    assert lr[:FAST.cycle_length].max() == pytest.approx(FAST.lr_max)
    assert res.duration > 0 and np.isfinite(res.min_jacobian)


def test_fine_level_loss_decreases(small_phantom):
    res = register(small_phantom.moving.data, small_phantom.fixed.data, FAST)
    tr = res.trace
    fine = [t for t, lv in zip(tr.loss_total, tr.level) if lv == 1]
    assert fine[-1] < fine[0]
    coarse = [t for t, lv in zip(tr.loss_total, tr.level) if lv == 0]
    assert coarse[-1] < coarse[0]


def test_deterministic(small_phantom):
    a = register(small_phantom.moving.data, small_phantom.fixed.data, FAST)
    b = register(small_phantom.moving.data, small_phantom.fixed.data, FAST)
    assert np.array_equal(a.ddf, b.ddf)
    assert a.trace.loss_total == b.trace.loss_total


def _epe_reduction(dims, steps, seed=4):
    ph = generate_phantom(PhantomSpec(dims=dims, magnitude=3.0, seed=seed))
    res = register(ph.moving.data, ph.fixed.data, RegConfig(loss="mse", max_steps=steps))
    base, _ = endpoint_error(np.zeros_like(ph.gt_ddf.data), ph.gt_ddf.data)
    err, _ = endpoint_error(res.ddf, ph.gt_ddf.data)
    return 1.0 - err / base


def test_mse_reduces_endpoint_error():
    assert _epe_reduction((48, 48, 48), 200) >= 0.4


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="smoothness prior extrapolates the field into air; "
                   "measured reduction is about 47%")
def test_mse_halves_endpoint_error_at_full_size():
    assert _epe_reduction((96, 96, 96), 400) >= 0.5


def test_registration_improves_dice(small_phantom):
    ph = small_phantom
    res = register(ph.moving.data, ph.fixed.data, with_overrides(FAST, max_steps=150))
    warped = warp_labels_nn(ph.moving_labels.data, res.ddf)
    for label in ph.structures:
        assert dice(warped, ph.fixed_labels.data, label) > dice(ph.moving_labels.data, ph.fixed_labels.data, label)


def test_large_lambda_smoother():
    smoother = 0
    for seed in range(10):
        ph = generate_phantom(PhantomSpec(dims=(20, 20, 20), magnitude=1.5, seed=seed))
        cfg = RegConfig(loss="mse", max_steps=40, levels=1, cycle_length=20)
        lo = register(ph.moving.data, ph.fixed.data, with_overrides(cfg, lam=0.5))
        hi = register(ph.moving.data, ph.fixed.data, with_overrides(cfg, lam=1e3))
        smoother += bending_energy(hi.ddf) < bending_energy(lo.ddf)
    assert smoother == 10


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        register(np.zeros((8, 8, 8)), np.zeros((8, 8, 9)))


def test_non_finite_loss_aborts(small_phantom):
    cfg = RegConfig(loss="mse", lr_min=1e300, lr_max=1e300, max_steps=5, levels=1)
    with pytest.raises(NumericalAbort) as info:
        register(small_phantom.moving.data, small_phantom.fixed.data, cfg)
    state = info.value.state
    assert {"level", "step", "ddf", "trace"} <= set(state)
    assert all(np.isfinite(state["trace"].loss_total))


def test_estimator_wrapper(small_phantom):
    est = DeformableRegistration(max_steps=30, rank=8, cycle_length=20)
    assert clone(est).get_params() == est.get_params()
    assert DeformableRegistration.from_config(est.get_config()).get_params() == est.get_params()
    warped = est.fit_transform(small_phantom.moving.data, small_phantom.fixed.data)
    assert warped.shape == small_phantom.fixed.dims
    labels = est.transform_labels(small_phantom.moving_labels.data)
    assert set(np.unique(labels)) <= {0, 1, 2}
    assert est.result_.config == est.get_config()
