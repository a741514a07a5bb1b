import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lowreg.svd import reconstruct, thin_svd, thin_svd_batch, truncate

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 24), st.integers(1, 24)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)
)


def _check_invariants(a, res):
    k = min(a.shape)
    assert res.U.shape == (a.shape[0], k) and res.V.shape == (a.shape[1], k) and res.S.shape == (k,)
    assert np.all(res.S >= 0) and np.all(np.diff(res.S) <= 0)
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(res.V.T @ res.V, np.eye(k), atol=1e-10)
    err = np.linalg.norm(res.U * res.S @ res.V.T - a)
    assert err <= 1e-8 * np.linalg.norm(a) + 1e-300


def test_identity():
    res = thin_svd(np.eye(3))
    np.testing.assert_allclose(res.S, [1, 1, 1], atol=1e-14)


def test_diagonal():
    res = thin_svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(res.S, [3, 2, 1], atol=1e-14)
    np.testing.assert_allclose(np.abs(res.U), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(np.abs(res.V), np.eye(3), atol=1e-14)


def test_singular_values_match_eigen_oracle(rng):
    a = rng.standard_normal((8, 6))
    S = thin_svd(a).S
    eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
    np.testing.assert_allclose(S**2, eig, rtol=1e-9)


def test_sign_convention(rng):
    res = thin_svd(rng.standard_normal((7, 5)))
    for j in range(res.k):
        col = res.U[:, j]
        first = col[np.abs(col) > 1e-12][0]
        assert first >= 0


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        thin_svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_input_not_modified(rng):
    a = np.asfortranarray(rng.standard_normal((5, 9)))
    before = a.copy()
    thin_svd(a)
    thin_svd_batch(np.stack([a, a]))
    np.testing.assert_array_equal(a, before)


@given(matrices)
def test_invariants_property(a):
    _check_invariants(a, thin_svd(a))


@given(matrices)
def test_transpose_swaps_factors(a):
    res, rt = thin_svd(a), thin_svd(a.T)
    np.testing.assert_allclose(res.S, rt.S, rtol=1e-10, atol=1e-10 * (res.S[0] + 1e-300))
    # compare projectors to stay independent of the sign convention
    big = res.S > 1e-6 * max(res.S[0], 1e-300)
    if big.sum() and np.all(np.diff(res.S[big]) < -1e-6 * res.S[0]):
        np.testing.assert_allclose(
            np.abs(res.U[:, big]), np.abs(rt.V[:, big]), atol=1e-6
        )


@given(matrices, st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
def test_scaling(a, c):
    s1 = thin_svd(a).S
    s2 = thin_svd(c * a).S
    np.testing.assert_allclose(s2, abs(c) * s1, rtol=1e-10, atol=1e-10 * abs(c) * (s1[0] + 1e-300))


def test_rank_deficient(rng):
    a = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 7))
    res = thin_svd(a)
    _check_invariants(a, res)
    assert res.S[2:].max() < 1e-12 * res.S[0]


def test_zero_matrix():
    res = thin_svd(np.zeros((4, 3)))
    _check_invariants(np.zeros((4, 3)), res)
    assert np.all(res.S == 0)


def test_batch_matches_single(rng):
    stack = rng.standard_normal((4, 9, 6))
    U, S, V = thin_svd_batch(stack)
    for b in range(4):
        res = thin_svd(stack[b])
        np.testing.assert_allclose(S[b], res.S, rtol=1e-12)
        np.testing.assert_allclose(U[b] * S[b] @ V[b].T, stack[b], atol=1e-12)


def test_truncate_full_rank_unchanged(rng):
    res = thin_svd(rng.standard_normal((6, 4)))
    U, S, V = truncate(res, res.k)
    np.testing.assert_array_equal(U, res.U)
    np.testing.assert_array_equal(S, res.S)
    np.testing.assert_array_equal(V, res.V)


def test_truncate_rank_one():
    _, S, _ = truncate(thin_svd(np.diag([3.0, 2.0, 1.0])), 1)
    np.testing.assert_allclose(S, [3.0])


@pytest.mark.parametrize("r", [0, 4, -1, 1.5])
def test_truncate_out_of_range(r):
    with pytest.raises(ValueError):
        truncate(thin_svd(np.eye(3)), r)


def test_eckart_young_random_candidates(rng):
    a = rng.standard_normal((12, 9))
    res = thin_svd(a)
    for r in (1, 3, 6):
        best = np.linalg.norm(a - reconstruct(*truncate(res, r)))
        for _ in range(200):
            cand = rng.standard_normal((12, r)) @ rng.standard_normal((r, 9))
            assert best <= np.linalg.norm(a - cand)


def test_reconstruct_full(rng):
    a = rng.standard_normal((7, 7))
    np.testing.assert_allclose(reconstruct(*thin_svd(a)), a, atol=1e-8 * np.linalg.norm(a))


def test_reconstruct_rank(rng):
    a = rng.standard_normal((10, 8))
    out = reconstruct(*truncate(thin_svd(a), 3))
    S = thin_svd(out).S
    assert np.all(S[3:] < 1e-8 * S[0])


def test_reconstruct_errors():
    with pytest.raises(ValueError):
        reconstruct(np.zeros((3, 0)), np.zeros(0), np.zeros((3, 0)))
    with pytest.raises(ValueError):
        reconstruct(np.zeros((3, 2)), np.zeros(3), np.zeros((3, 2)))
