"""Adaptive-moment optimizers and the cosine warm-restart schedule.

The update functions work on plain arrays and return the new value; the
state object is mutated in place only when the step succeeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, NumericalError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, x, **kw):
        return cls(np.zeros_like(x, dtype=float), np.zeros_like(x, dtype=float), **kw)


@dataclass
class AdaHessianState:
    m: np.ndarray
    v_h: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    # a single Hutchinson probe can put the curvature near zero; 1e-4 keeps the step bounded
    eps: float = 1e-4
    lr: float = 1e-3
    hutchinson_samples: int = 1

    @classmethod
    def zeros_like(cls, x, **kw):
        return cls(np.zeros_like(x, dtype=float), np.zeros_like(x, dtype=float), **kw)


@dataclass
class CosineRestartSchedule:
    base_lr: float = 1e-3
    period: int = 10
    t: int = field(default=0)

    def __post_init__(self):
        if self.base_lr <= 0 or self.period < 1:
            raise ContractError("cosine schedule needs base_lr > 0 and period >= 1")


def cosine_lr(sched: CosineRestartSchedule) -> float:
    """Learning rate at ``sched.t``; restarts at multiples of the period."""
    phase = (sched.t % sched.period) / sched.period
    return 0.5 * sched.base_lr * (1.0 + math.cos(math.pi * phase))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite value in optimizer input")


def adam_step(state: AdamState, var, grad, ascent=False):
    var = np.asarray(var, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if var.shape != grad.shape or state.m.shape != var.shape:
        raise ContractError(f"shape mismatch: var {var.shape}, grad {grad.shape}, state {state.m.shape}")
    _check_finite(var, grad)
    if state.weight_decay:
        grad = grad + state.weight_decay * var
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = var + delta if ascent else var - delta
    _check_finite(new)
    state.m, state.v, state.step = m, v, step
    return new


def adahessian_step(state: AdaHessianState, var, grad, hess_diag, ascent=False):
    """One AdaHessian update with a diagonal curvature estimate.

    The caller picks the direction: ascent for sample generation, descent
    for training.
    """
    var = np.asarray(var, dtype=float)
    grad = np.asarray(grad, dtype=float)
    hess_diag = np.asarray(hess_diag, dtype=float)
    if not (var.shape == grad.shape == hess_diag.shape == state.m.shape):
        raise ContractError("adahessian_step shape mismatch")
    _check_finite(var, grad, hess_diag)
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v_h = state.beta2 * state.v_h + (1 - state.beta2) * hess_diag * hess_diag
    m_hat = m / (1 - state.beta1**step)
    v_hat = v_h / (1 - state.beta2**step)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = var + delta if ascent else var - delta
    _check_finite(new)
    state.m, state.v_h, state.step = m, v_h, step
    return new
