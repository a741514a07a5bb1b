"""Fast invariant checks runnable from an installed package (``lowreg selftest``)."""

import sys
import time

import numpy as np

from . import deform, evaluation, lowrank, optim, registration, similarity, svd
from .volume import PhantomSpec, generate_phantom


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _fd_check(fun, x, grad, probes, h, rng, tol):
    worst = 0.0
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for idx in rng.choice(flat.size, size=probes, replace=False):
        old = flat[idx]
        flat[idx] = old + h
        up = fun(x)
        flat[idx] = old - h
        dn = fun(x)
        flat[idx] = old
        fd = (up - dn) / (2 * h)
        if abs(fd) < 1e-9 and abs(g[idx]) < 1e-9:
            continue
        worst = max(worst, _rel(fd, g[idx]))
    if worst > tol:
        raise AssertionError(f"worst relative FD mismatch {worst:.2e} > {tol:g}")


def _random_matrices(rng, count=40):
    for _ in range(count):
        m, n = rng.integers(1, 40, size=2)
        yield rng.standard_normal((m, n))


def check_svd_orthonormality(rng):
    for a in _random_matrices(rng):
        U, S, V = svd.thin_svd(a)
        k = S.size
        assert np.abs(U.T @ U - np.eye(k)).max() < 1e-10, "U columns not orthonormal"
        assert np.abs(V.T @ V - np.eye(k)).max() < 1e-10, "V columns not orthonormal"


def check_svd_reconstruction(rng):
    for a in _random_matrices(rng):
        U, S, V = svd.thin_svd(a)
        err = np.linalg.norm(U * S @ V.T - a) / max(np.linalg.norm(a), 1e-300)
        assert err < 1e-8, f"relative reconstruction error {err:.2e}"
        assert np.all(np.diff(S) <= 0) and np.all(S >= 0), "singular values not sorted/non-negative"


def check_svd_eckart_young(rng):
    for a in _random_matrices(rng, 10):
        res = svd.thin_svd(a)
        r = int(rng.integers(1, res.k + 1))
        best = np.linalg.norm(a - svd.reconstruct(*svd.truncate(res, r)))
        for _ in range(20):
            cand = rng.standard_normal((a.shape[0], r)) @ rng.standard_normal((r, a.shape[1]))
            assert np.linalg.norm(a - cand) >= best - 1e-9, "random rank-r candidate beat truncation"


def _small_phantom():
    return generate_phantom(PhantomSpec(dims=(24, 20, 16), magnitude=1.5, seed=3))


def check_projector_identity(rng):
    ph = _small_phantom()
    p = lowrank.LowRankProjector(rank=8).fit(ph.fixed.data)
    P = p.transform(ph.fixed.data)
    target = registration._diag_stack(p.S_)
    err = np.sqrt(((P - target) ** 2).sum(axis=(1, 2))).max()
    assert err <= 1e-6, f"projected fixed image differs from singular values by {err:.2e}"


def check_projector_linearity(rng):
    ph = _small_phantom()
    p = lowrank.LowRankProjector(rank=6).fit(ph.fixed.data)
    a, b = rng.random((2,) + ph.fixed.dims)
    lhs = p.transform(2.0 * a - 0.5 * b)
    rhs = 2.0 * p.transform(a) - 0.5 * p.transform(b)
    assert np.abs(lhs - rhs).max() < 1e-6


def check_lrr_gradient(rng):
    ph = _small_phantom()
    p = lowrank.LowRankProjector(rank=6).fit(ph.fixed.data)
    w = ph.fixed.data + 0.1 * rng.standard_normal(ph.fixed.dims)
    _, g = p.loss_and_grad(w)
    _fd_check(p.loss, w, g, 30, 1e-4, rng, 1e-4)


def check_mse_gradient(rng):
    a, b = rng.random((2, 8, 7, 6))
    _fd_check(lambda x: similarity.mse_loss(x, b), a, similarity.mse_grad(a, b), 30, 1e-4, rng, 1e-4)


def check_ncc_gradient(rng):
    a, b = rng.random((2, 8, 7, 6))
    _fd_check(lambda x: similarity.ncc_loss(x, b), a, similarity.ncc_grad(a, b), 30, 1e-4, rng, 1e-4)


def check_warp_identity(rng):
    img = rng.random((9, 8, 7))
    out = deform.warp_trilinear(img, np.zeros(img.shape + (3,)))
    assert np.array_equal(out, img), "zero field changed the image"


def check_warp_integer_shift(rng):
    img = rng.random((9, 8, 7))
    d = np.zeros(img.shape + (3,))
    d[..., 1] = 2.0
    out = deform.warp_trilinear(img, d)
    assert np.allclose(out[:, :-2], img[:, 2:], atol=1e-12), "integer shift is not a pure translation"


def check_warp_gradient(rng):
    img = rng.random((8, 7, 6))
    d = rng.uniform(-1.5, 1.5, img.shape + (3,))
    up = rng.standard_normal(img.shape)
    g = deform.warp_gradient(img, d, up)

    def fun(x):
        return float((deform.warp_trilinear(img, x) * up).sum())

    _fd_check(fun, d, g, 30, 1e-4, rng, 1e-3)


def check_bending_affine_null(rng):
    x, y, z = np.meshgrid(*(np.arange(n, dtype=float) for n in (8, 7, 6)), indexing="ij")
    A = rng.standard_normal((3, 4))
    d = np.stack([A[i, 0] * x + A[i, 1] * y + A[i, 2] * z + A[i, 3] for i in range(3)], axis=-1)
    assert deform.bending_energy(d) < 1e-20, "affine field has non-zero bending energy"


def check_bending_gradient(rng):
    d = rng.standard_normal((7, 6, 5, 3))
    _, g = deform.bending_energy(d, return_grad=True)
    _fd_check(deform.bending_energy, d, g, 30, 1e-4, rng, 1e-4)


def check_objective_gradient(rng):
    ph = _small_phantom()
    cfg = registration.RegConfig(loss="lrr", rank=6, lam=0.5)
    p = lowrank.LowRankProjector(rank=6).fit(ph.fixed.data)
    d = rng.uniform(-1.0, 1.0, ph.fixed.dims + (3,))
    (_, _, _), g = registration.objective_grad(ph.moving.data, ph.fixed.data, d, cfg, p)

    def fun(x):
        w = deform.warp_trilinear(ph.moving.data, x)
        return registration.objective(w, ph.fixed.data, x, cfg, p)[0]

    _fd_check(fun, d, g, 30, 1e-4, rng, 1e-3)


def check_dice_trivia(rng):
    a = rng.integers(0, 3, (10, 10, 10)).astype(np.uint8)
    assert evaluation.dice(a, a, 1) == 1.0
    assert evaluation.dice(np.zeros_like(a), np.zeros_like(a), 1) == 1.0
    b = np.zeros_like(a)
    b[a == 0] = 1
    assert evaluation.dice(a, b, 1) == 0.0


def check_wilcoxon_exact(rng):
    res = evaluation.wilcoxon_signed_rank([1, 2, 3, 4, 5])
    assert res.statistic == 0 and res.pvalue == 0.0625, f"got W={res.statistic}, p={res.pvalue}"


def check_adam_first_step(rng):
    p = np.zeros(1)
    optim.adam_step(p, optim.AdamState.zeros_like(p), np.ones(1), 1e-3)
    assert abs(p[0] + 1e-3) < 1e-6, f"first Adam step moved by {p[0]}"


CHECKS = [
    ("svd_orthonormality", check_svd_orthonormality),
    ("svd_reconstruction", check_svd_reconstruction),
    ("svd_eckart_young", check_svd_eckart_young),
    ("projector_identity", check_projector_identity),
    ("projector_linearity", check_projector_linearity),
    ("lrr_gradient_fd", check_lrr_gradient),
    ("mse_gradient_fd", check_mse_gradient),
    ("ncc_gradient_fd", check_ncc_gradient),
    ("warp_zero_field_identity", check_warp_identity),
    ("warp_integer_shift", check_warp_integer_shift),
    ("warp_gradient_fd", check_warp_gradient),
    ("bending_affine_null_space", check_bending_affine_null),
    ("bending_gradient_fd", check_bending_gradient),
    ("objective_gradient_fd", check_objective_gradient),
    ("dice_trivia", check_dice_trivia),
    ("wilcoxon_exact_n5", check_wilcoxon_exact),
    ("adam_first_step", check_adam_first_step),
]


def run_selftest(stream=None, seed=0):
    """Run every check; print one PASS/FAIL line each. Returns the failed names."""
    stream = stream or sys.stdout
    failed = []
    t0 = time.perf_counter()
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            fn(rng)
        except Exception as exc:  # report every failure, keep going
            failed.append(name)
            print(f"FAIL {name}: {type(exc).__name__}: {exc}", file=stream)
        else:
            print(f"PASS {name}", file=stream)
    print(
        f"{len(CHECKS) - len(failed)}/{len(CHECKS)} checks passed in {time.perf_counter() - t0:.1f} s",
        file=stream,
    )
    return failed
