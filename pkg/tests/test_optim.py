import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lowreg.optim import AdamState, Trace, adam_step, cyclic_lr


def test_first_step_scalar():
    p = np.zeros(1)
    adam_step(p, AdamState.zeros_like(p), np.ones(1), 1e-3)
    assert p[0] == pytest.approx(-1e-3, abs=1e-6)


def _reference_adam(p, g_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


@given(st.integers(0, 10_000), st.integers(1, 30))
def test_matches_textbook_adam(seed, steps):
    rng = np.random.default_rng(seed)
    p0 = rng.standard_normal(11)
    grads = rng.standard_normal((steps, 11)) * 10.0 ** rng.integers(-6, 3)
    p = p0.copy()
    state = AdamState.zeros_like(p)
    for g in grads:
        adam_step(p, state, g, 0.01)
    np.testing.assert_allclose(p, _reference_adam(p0, grads, 0.01), rtol=1e-9, atol=1e-12)
    assert state.t == steps


def test_zero_gradient_keeps_params(rng):
    p = rng.standard_normal((3, 4))
    before = p.copy()
    state = AdamState.zeros_like(p)
    for _ in range(50):
        adam_step(p, state, np.zeros_like(p), 0.1)
    assert np.array_equal(p, before)


def test_shape_and_layout_checks():
    p = np.zeros(4)
    with pytest.raises(ValueError):
        adam_step(p, AdamState.zeros_like(p), np.zeros(5), 0.1)
    q = np.zeros((4, 4))[:, ::2]
    with pytest.raises(ValueError):
        adam_step(q, AdamState.zeros_like(np.zeros((4, 2))), np.zeros((4, 2)), 0.1)


def test_cyclic_lr_shape():
    lrs = [cyclic_lr(s, 1e-3, 1e-2, 100) for s in range(300)]
    assert lrs[0] == 1e-3 and lrs[50] == pytest.approx(1e-2) and lrs[100] == 1e-3
    assert min(lrs) == pytest.approx(1e-3) and max(lrs) == pytest.approx(1e-2)
    assert all(1e-3 - 1e-15 <= v <= 1e-2 + 1e-15 for v in lrs)
    assert lrs[:100] == lrs[100:200]


def test_cyclic_lr_validation():
    with pytest.raises(ValueError):
        cyclic_lr(0, 1.0, 0.5, 10)
    assert cyclic_lr(3, 0.1, 0.2, 1) == 0.2


def test_trace_rows():
    t = Trace()
    t.append(0, 0, 0.1, 3.0, 2.0, 1.0)
    t.append(1, 0, 0.2, 2.0, 1.5, 0.5)
    assert len(t) == 2
    assert list(t.rows())[1] == (1, 0, 0.2, 2.0, 1.5, 0.5)
    assert Trace.COLUMNS == ("step", "level", "lr", "loss_total", "loss_sim", "loss_reg")
