"""Adam and the fixed-count minibatch ascent loop used by each period update."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ContractError, PeriodUpdateAborted, PoisonedStepError

__all__ = ["AdamState", "adam_step", "run_minibatch_ascent", "AscentResult"]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One Adam update that *increases* the objective whose gradient is ``grads``.

    The gradient is negated internally and a standard bias-corrected Adam
    descent step is taken.  Inputs are not mutated.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractError(f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if state.t < 0:
        raise ContractError("Adam step counter must be non-negative")
    bad = ~np.isfinite(grads)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise PoisonedStepError(i, float(grads[i]))
    g = -grads
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


@dataclass
class AscentResult:
    params: np.ndarray
    state: AdamState
    values: list[float] = field(default_factory=list)


def run_minibatch_ascent(objective: Callable[[int, np.ndarray], tuple[float, np.ndarray]],
                         params: np.ndarray, state: AdamState, m: int) -> AscentResult:
    """Apply exactly ``m`` Adam steps, one per minibatch index ``0..m-1``.

    ``objective(i, params)`` returns ``(value, gradient)`` on minibatch ``i``.
    Any failure inside the sampler or a poisoned gradient aborts the whole
    update with :class:`PeriodUpdateAborted`.
    """
    if m < 1:
        raise ContractError("minibatch count m must be at least 1")
    values = []
    for i in range(m):
        try:
            value, grad = objective(i, params)
            params, state = adam_step(params, grad, state)
        except PeriodUpdateAborted:
            raise
        except (ArithmeticError, ValueError, FloatingPointError) as exc:
            raise PeriodUpdateAborted(exc) from exc
        values.append(float(value))
    return AscentResult(params, state, values)
