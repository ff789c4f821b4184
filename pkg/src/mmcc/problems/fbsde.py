"""Quadratic-driver FBSDE recast as a control problem.

Forward: ``X = x0 + sqrt(2) W``.  Backward, with ``c`` the network's
estimate of the spatial gradient of the PDE solution and ``Z = sqrt(2) c``::

    Y' = Y - beta |c|^2 dt + Z . dW

Period 0 controls are ``(y, c_0)``.  The trainer maximizes
``-(Y_T - g(X_T))^2``; reports flip the sign back to a loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .. import autodiff as ad
from ..errors import ConfigurationError
from ..simulate import ProblemDefinition

__all__ = ["FbsdeSpec", "build_fbsde", "fbsde_oracle_y", "log_terminal", "fbsde_oracle_policy_loss"]

SQRT2 = np.sqrt(2.0)


def log_terminal(x: np.ndarray) -> np.ndarray:
    """``g(x) = ln((1 + |x|^2) / 2)`` row-wise."""
    return np.log((1.0 + np.sum(x * x, axis=-1)) / 2.0)


def _log_terminal_tensor(x):
    return ad.log((ad.square(x).sum(axis=1) + 1.0) * 0.5)


@dataclass
class FbsdeSpec:
    d: int = 100
    T: float = 1.0
    N_T: int = 20
    beta: float = -1.0
    x0: float = 0.0
    hidden: tuple[int, ...] | None = None

    def diagnostics(self) -> list[str]:
        out = []
        if self.N_T < 1:
            out.append("N_T must be >= 1")
        if self.d < 1:
            out.append("d must be >= 1")
        if self.beta == 0:
            out.append("beta must be nonzero (the oracle divides by it)")
        if not self.T > 0:
            out.append("T must be positive")
        return out


def build_fbsde(spec: FbsdeSpec | None = None) -> ProblemDefinition:
    spec = spec or FbsdeSpec()
    if spec.diagnostics():
        raise ConfigurationError("; ".join(spec.diagnostics()))
    d, beta = spec.d, spec.beta
    dt = spec.T / spec.N_T
    sqdt = np.sqrt(dt)

    def transition(t, s, c, z):
        x = s[:, :d]
        if t == 0:
            y, grad = c[:, :1], c[:, 1:]
        else:
            y, grad = s[:, d:], c
        dw = z * sqdt
        x1 = x + dw * SQRT2
        drift = ad.square(grad).sum(axis=1, keepdims=True) * (beta * dt)
        noise = (grad * dw).sum(axis=1, keepdims=True) * SQRT2
        return ad.concat([x1, y - drift + noise], axis=1)

    def path_utility(states, controls):
        sT = states[-1]
        err = sT[:, d] - _log_terminal_tensor(sT[:, :d])
        return -ad.square(err)

    def features(t, s):
        return s[:, :d]

    s0 = np.zeros(d + 1)
    s0[:d] = spec.x0
    return ProblemDefinition(
        name="fbsde", n_s=d + 1, n_c=d, n_c0=d + 1, n_z=d, T=spec.N_T, s0=s0,
        transition=transition, path_utility=path_utility, features=features, n_features=d,
        hidden=list(spec.hidden) if spec.hidden else [d + 10, d + 10], sign=-1.0, spec=spec,
    )


def fbsde_oracle_y(spec: FbsdeSpec, N_mc: int = 10**7, seed: int = 0, chunk: int = 250_000
                   ) -> tuple[float, float]:
    """Monte Carlo ``(1/beta) ln E exp(beta g(X_T))`` with ``X_T = x0 + sqrt(2) W_T``.

    Returns ``(y*, se)``; the standard error comes from the delta method on
    the mean of ``exp(beta g)``, all in log space.
    """
    if N_mc < 1000:
        raise ConfigurationError("N_mc must be >= 1000")
    rng = np.random.default_rng(seed)
    beta = spec.beta
    lse1 = []
    lse2 = []
    left = N_mc
    while left > 0:
        n = min(chunk, left)
        w = rng.standard_normal((n, spec.d)) * np.sqrt(spec.T)
        e = beta * log_terminal(spec.x0 + SQRT2 * w)
        lse1.append(logsumexp(e))
        lse2.append(logsumexp(2.0 * e))
        left -= n
    log_mean = logsumexp(lse1) - np.log(N_mc)
    log_m2 = logsumexp(lse2) - np.log(N_mc)
    # relative variance of exp(beta g) = E[e^2]/E[e]^2 - 1
    rel_var = max(np.exp(log_m2 - 2.0 * log_mean) - 1.0, 0.0)
    y = log_mean / beta
    se = np.sqrt(rel_var / N_mc) / abs(beta)
    return float(y), float(se)


def fbsde_oracle_policy_loss(spec: FbsdeSpec, y_star: float, N_mc: int = 10**6, seed: int = 1) -> float:
    """``E|y* - g(X_T)|^2``: loss of the policy that starts at the oracle y* and never steers.

    Used as the scale against which a trained objective is judged.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((N_mc, spec.d)) * np.sqrt(spec.T)
    g = log_terminal(spec.x0 + SQRT2 * w)
    return float(np.mean((y_star - g) ** 2))
