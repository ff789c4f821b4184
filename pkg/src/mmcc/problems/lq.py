"""Scalar linear-quadratic family used for analytic checks and cost scaling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..simulate import ProblemDefinition

__all__ = ["LqSpec", "build_lq", "lq_one_period_optimum"]


@dataclass
class LqSpec:
    """``s' = a s + b c + sigma z``, reward ``-q s'^2 - r c^2`` each period."""

    T: int = 3
    a: float = 1.0
    b: float = 1.0
    sigma: float = 0.0
    q: float = 1.0
    r: float = 0.5
    s0: float = 1.0
    n_s: int = 1
    hidden: tuple[int, ...] = (16, 16)


def build_lq(spec: LqSpec | None = None) -> ProblemDefinition:
    spec = spec or LqSpec()
    n = spec.n_s

    def transition(t, s, c, z):
        s_next = s * spec.a + c * spec.b
        if spec.sigma != 0.0:
            s_next = s_next + ad.Tensor(z * spec.sigma)
        return s_next

    def reward(t, s_next, s, c):
        return -(ad.square(s_next) * spec.q).sum(axis=1) - (ad.square(c) * spec.r).sum(axis=1)

    return ProblemDefinition(
        name="lq", n_s=n, n_c=n, n_z=n if spec.sigma != 0.0 else 0, T=spec.T,
        s0=np.full(n, spec.s0), transition=transition, reward=reward,
        hidden=list(spec.hidden), spec=spec,
    )


def lq_one_period_optimum(spec: LqSpec) -> float:
    """Maximizer of ``-q (a s0 + b c)^2 - r c^2`` (noise only adds a constant)."""
    return -spec.q * spec.a * spec.b * spec.s0 / (spec.q * spec.b ** 2 + spec.r)
