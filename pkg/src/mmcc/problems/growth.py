"""Multi-sector stochastic growth with Cobb-Douglas production and log utility.

State ``(Y, lambda)`` in R^{2n}.  Control vector layout (width ``(n+1)^2``)::

    [Z, L_1..L_n,  c_1, X_11..X_n1,  c_2, X_12..X_n2, ...]

group 0 is the time budget (scaled to ``H``) and group ``j`` splits commodity
``j`` (scaled to ``Y_j``) between consumption and the input it supplies to
each sector, so both resource identities hold by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import ConfigurationError
from ..policy import GroupedSoftmaxHead
from ..simulate import FixedPolicy, ProblemDefinition

__all__ = ["GrowthSpec", "DEFAULT_A", "build_growth", "growth_infinite_baseline", "GrowthBaseline",
           "unpack_controls", "control_groups"]

# Input-output shares for six sectors; row i lists the shares of commodities
# 1..6 used by sector i, so b_i = 1 - row sum is labor's share.
DEFAULT_A = np.array([
    [0.45, 0.01, 0.01, 0.01, 0.02, 0.07],
    [0.01, 0.20, 0.15, 0.01, 0.04, 0.11],
    [0.01, 0.03, 0.25, 0.01, 0.09, 0.10],
    [0.02, 0.06, 0.05, 0.10, 0.13, 0.10],
    [0.04, 0.01, 0.13, 0.02, 0.15, 0.18],
    [0.02, 0.02, 0.05, 0.01, 0.07, 0.22],
])


@dataclass
class GrowthSpec:
    n: int = 6
    T: int = 5
    beta: float = 0.95
    theta: tuple[float, ...] = (0.1, 0.1, 0.12, 0.08, 0.1, 0.2, 0.3)
    tau: tuple[float, ...] | None = None
    H: float = 1.0
    A: np.ndarray = field(default_factory=lambda: DEFAULT_A.copy())
    b: np.ndarray | None = None
    Y0: tuple[float, ...] = (6.0, 10.0, 9.0, 5.0, 8.0, 4.0)
    shock_sd: float = 1.0
    hidden: tuple[int, ...] = (300, 300)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if self.b is None:
            self.b = 1.0 - self.A.sum(axis=1)
        self.b = np.asarray(self.b, dtype=float)
        if self.tau is None:
            self.tau = (1.0,) * (self.n + 1)

    def diagnostics(self) -> list[str]:
        out = []
        n = self.n
        if self.A.shape != (n, n):
            out.append(f"A must be {n}x{n}, got {self.A.shape}")
            return out
        if len(self.theta) != n + 1:
            out.append(f"theta needs n+1 = {n + 1} weights")
        if len(self.Y0) != n or self.b.shape != (n,):
            out.append(f"Y0 and b need n = {n} entries")
            return out
        rts = self.b + self.A.sum(axis=1)
        bad = np.flatnonzero(np.abs(rts - 1.0) > 1e-9)
        if bad.size:
            out.append("returns to scale: b_i + sum_j a_ij must equal 1; sector(s) "
                       + ", ".join(f"{i + 1} ({rts[i]:.6g})" for i in bad))
        if np.any(self.b <= 0):
            out.append("all b_i must be strictly positive")
        if np.any(self.A <= 0):
            out.append("all a_ij must be strictly positive")
        if np.any(np.asarray(self.tau) != 1.0):
            out.append("only log utility (tau = 1) is implemented")
        if not 0 < self.beta < 1:
            out.append("beta must lie in (0, 1)")
        if not self.H > 0 or np.any(np.asarray(self.Y0) <= 0):
            out.append("H and Y0 must be strictly positive")
        return out


def control_groups(n: int) -> list[list[int]]:
    return [list(range((n + 1) * j, (n + 1) * (j + 1))) for j in range(n + 1)]


def unpack_controls(c: np.ndarray, n: int) -> dict[str, np.ndarray]:
    """Split (B, (n+1)^2) controls into Z (B,), L (B, n), cons (B, n), X (B, n, n) with X[:, i, j]."""
    Z = c[:, 0]
    L = c[:, 1:n + 1]
    blocks = c[:, n + 1:].reshape(c.shape[0], n, n + 1)   # [:, j, :] = (c_j, X_1j..X_nj)
    cons = blocks[:, :, 0]
    X = np.transpose(blocks[:, :, 1:], (0, 2, 1))
    return {"Z": Z, "L": L, "c": cons, "X": X}


def _gather_indices(n: int):
    """Flat control indices for (L_i) and (X_ij) laid out row-major in (i, j)."""
    L_idx = np.arange(1, n + 1)
    X_idx = np.array([[(n + 1) * (j + 1) + 1 + i for j in range(n)] for i in range(n)])
    c_idx = np.array([(n + 1) * (j + 1) for j in range(n)])
    return L_idx, X_idx, c_idx


def build_growth(spec: GrowthSpec | None = None) -> ProblemDefinition:
    spec = spec or GrowthSpec()
    if spec.diagnostics():
        raise ConfigurationError("; ".join(spec.diagnostics()))
    n = spec.n
    L_idx, X_idx, c_idx = _gather_indices(n)
    A, b = spec.A, spec.b
    theta = np.asarray(spec.theta, dtype=float)
    H = spec.H
    groups = control_groups(n)

    def scales(state):
        B = state.data.shape[0]
        return ad.concat([ad.Tensor(np.full((B, 1), H)), state[:, :n]], axis=1)

    head = GroupedSoftmaxHead(groups, scales)

    def transition(t, s, c, z):
        logc = ad.log(c)
        logL = logc[:, L_idx]                          # (B, n)
        logX = logc[:, X_idx.ravel()]                  # (B, n*n), row-major (i, j)
        inputs = (logX * A.ravel()).reshape(-1, n, n).sum(axis=2)
        logY = logL * b + inputs + z * spec.shock_sd
        return ad.concat([ad.exp(logY), ad.Tensor(np.exp(z * spec.shock_sd))], axis=1)

    disc = spec.beta ** np.arange(spec.T + 1)
    terminal_const = theta[0] * np.log(H)

    def reward(t, s_next, s, c):
        logc = ad.log(c)
        u = (logc[:, c_idx] * theta[1:]).sum(axis=1) + logc[:, 0] * theta[0]
        u = u * disc[t]
        if t == spec.T - 1:
            # period T: consume all output, take all time as leisure
            tail = (ad.log(s_next[:, :n]) * theta[1:]).sum(axis=1) + terminal_const
            u = u + tail * disc[spec.T]
        return u

    def features(t, s):
        return ad.log(s)

    def sampler(gen, size, n_z, t):
        return gen.standard_normal((size, n_z))

    s0 = np.concatenate([np.asarray(spec.Y0, dtype=float), np.ones(n)])
    return ProblemDefinition(
        name="growth", n_s=2 * n, n_c=(n + 1) ** 2, n_z=n, T=spec.T, s0=s0,
        transition=transition, reward=reward, head=head, features=features, n_features=2 * n,
        shock_sampler=sampler, hidden=list(spec.hidden), spec=spec,
    )


@dataclass
class GrowthBaseline:
    gamma: np.ndarray
    L: np.ndarray
    Z: float
    consume_share: np.ndarray       # c_i = share_i * Y_i
    input_share: np.ndarray         # X_ij = input_share[i, j] * Y_j
    policy: FixedPolicy


def growth_infinite_baseline(spec: GrowthSpec) -> GrowthBaseline:
    """Stationary optimal policy of the infinite-horizon log economy.

    ``gamma^T = theta_{1..n}^T (I - beta A)^{-1}``; labor and leisure are
    constant fractions of ``H``; consumption and inputs are constant fractions
    of current output.
    """
    n, beta, A, b = spec.n, spec.beta, spec.A, spec.b
    theta = np.asarray(spec.theta, dtype=float)
    M = np.eye(n) - beta * A
    if abs(np.linalg.det(M)) < 1e-12:
        raise ConfigurationError("I - beta*A is singular")
    gamma = np.linalg.solve(M.T, theta[1:])
    denom = theta[0] + beta * gamma @ b
    L = beta * gamma * b * spec.H / denom
    Z = theta[0] * spec.H / denom
    input_share = beta * gamma[:, None] * A / gamma[None, :]
    consume_share = theta[1:] / gamma
    L_idx, X_idx, c_idx = _gather_indices(n)

    def fn(t, s):
        Y = s.data[:, :n]
        B = Y.shape[0]
        out = np.empty((B, (n + 1) ** 2))
        out[:, 0] = Z
        out[:, L_idx] = L
        out[:, c_idx] = consume_share * Y
        out[:, X_idx.ravel()] = (input_share[None, :, :] * Y[:, None, :]).reshape(B, n * n)
        return ad.Tensor(out)

    return GrowthBaseline(gamma, L, float(Z), consume_share, input_share, FixedPolicy(fn, "growth-baseline"))
