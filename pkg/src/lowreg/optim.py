"""Adam updates and a triangular cyclic learning rate."""

from dataclasses import dataclass, field

import numba
import numpy as np


def cyclic_lr(step, lr_min, lr_max, cycle_length):
    """Triangular schedule: ``lr_min`` at the start of each cycle, ``lr_max`` halfway."""
    if lr_min > lr_max:
        raise ValueError("lr_min must not exceed lr_max")
    if cycle_length < 2:
        return lr_max
    half = cycle_length / 2.0
    pos = step % cycle_length
    frac = 1.0 - abs(pos / half - 1.0)
    return lr_min + (lr_max - lr_min) * frac


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


@numba.njit(cache=True, parallel=True)
def _adam_kernel(p, m, v, g, step, b1, b2, eps_hat):
    for i in numba.prange(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) + eps_hat)


def _flat(a):
    if not (a.flags.c_contiguous and a.dtype == np.float64):
        raise ValueError("Adam buffers must be C-contiguous float64 arrays")
    return a.reshape(-1)


def adam_step(params, state, grad, lr):
    """One bias-corrected Adam update; ``params`` and ``state`` change in place.

    The update is ``lr * m_hat / (sqrt(v_hat) + eps)`` with the usual bias
    corrections, evaluated in a rearranged but algebraically identical form.
    Returns ``params`` for convenience.
    """
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr2 = np.sqrt(1.0 - b2**state.t)
    step = lr * corr2 / (1.0 - b1**state.t)
    _adam_kernel(
        _flat(params), _flat(state.m), _flat(state.v), grad.reshape(-1),
        step, b1, b2, state.eps * corr2,
    )
    return params


@dataclass
class Trace:
    step: list = field(default_factory=list)
    level: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    loss_sim: list = field(default_factory=list)
    loss_reg: list = field(default_factory=list)

    def append(self, step, level, lr, total, sim, reg):
        self.step.append(step)
        self.level.append(level)
        self.lr.append(lr)
        self.loss_total.append(total)
        self.loss_sim.append(sim)
        self.loss_reg.append(reg)

    def __len__(self):
        return len(self.step)

    COLUMNS = ("step", "level", "lr", "loss_total", "loss_sim", "loss_reg")

    def rows(self):
        return zip(*(getattr(self, c) for c in self.COLUMNS))
