"""Epstein-Zin utility under Heston stochastic volatility, as an FBSDE control problem.

The value-function factor ``g(t, y)`` solves a semi-linear parabolic PDE;
``g(0, y0)`` is the optimal period-0 control ``xi_0`` of

    d xi  = [r~(eta) xi - C xi^p] dt + Z dW,     d eta = a~(eta) dt + beta(eta) dW

with loss ``E (xi_T - 1)^2``.  Three independent routes to ``g`` live here:
a Crank-Nicolson finite-difference solver, an affine (Riccati) solution for
the linear case ``p = 0``, and a closed form when the volatility is frozen.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.linalg import solve_banded

from .. import autodiff as ad
from ..errors import ConfigurationError, ConvergenceError
from ..simulate import ProblemDefinition

__all__ = ["HestonSpec", "build_heston_fbsde", "heston_pde_oracle", "heston_affine_oracle",
           "heston_frozen_vol_value", "kraft_solvable_psi", "PdeResult"]


def kraft_solvable_psi(gamma: float, rho: float) -> float:
    """EIS at which the consumption term of the PDE becomes linear."""
    return 2.0 - gamma + (1.0 - gamma) ** 2 / gamma * rho ** 2


@dataclass
class HestonSpec:
    r: float = 0.05
    delta: float = 0.08
    gamma: float = 2.0
    rho: float = -0.5
    kappa: float = 5.0
    ybar: float = 0.0225
    lambda_bar: float | None = None     # default 0.07 / sqrt(ybar)
    beta_bar: float = 0.25
    psi: float = 0.125
    T: float = 10.0
    steps: int = 120
    y0: float = 0.1
    hidden: tuple[int, ...] = (120, 120)
    xi0_init: float = 1.0

    def __post_init__(self):
        if self.lambda_bar is None:
            self.lambda_bar = 0.07 / np.sqrt(self.ybar)

    def diagnostics(self) -> list[str]:
        out = []
        if not self.gamma > 0 or self.gamma == 1:
            out.append("gamma must be positive and != 1")
        if not self.psi > 0 or self.psi == 1:
            out.append("psi must be positive and != 1")
        if self.steps < 1:
            out.append("steps must be >= 1")
        if not self.T > 0:
            out.append("T must be positive")
        if self.y0 < 0 or self.ybar < 0 or self.beta_bar < 0:
            out.append("variances and beta_bar must be non-negative")
        return out

    # derived quantities
    @property
    def k(self) -> float:
        return self.gamma / (self.gamma + (1.0 - self.gamma) * self.rho ** 2)

    @property
    def theta(self) -> float:
        return (1.0 - self.gamma) / (1.0 - 1.0 / self.psi)

    @property
    def C(self) -> float:
        return self.theta * self.delta ** self.psi / (self.psi * self.k)

    @property
    def p(self) -> float:
        return 1.0 - self.psi * self.k / self.theta

    def affine_coefficients(self) -> dict[str, float]:
        """``r~ = r0 + r1 y``, ``a~ = a0 + a1 y``, ``beta(y)^2 = b2 y``."""
        g = self.gamma
        risk = (1.0 - g) / g
        return {
            "r0": (self.r * (1.0 - g) - self.delta * self.theta) / self.k,
            "r1": 0.5 * risk * self.lambda_bar ** 2 / self.k,
            "a0": self.kappa * self.ybar,
            "a1": -self.kappa + risk * self.lambda_bar * self.beta_bar * self.rho,
            "b2": self.beta_bar ** 2,
        }

    def r_tilde(self, y):
        c = self.affine_coefficients()
        return c["r0"] + c["r1"] * y

    def alpha_tilde(self, y):
        c = self.affine_coefficients()
        return c["a0"] + c["a1"] * y


def build_heston_fbsde(spec: HestonSpec | None = None) -> ProblemDefinition:
    spec = spec or HestonSpec()
    if spec.diagnostics():
        raise ConfigurationError("; ".join(spec.diagnostics()))
    co = spec.affine_coefficients()
    dt = spec.T / spec.steps
    sqdt = np.sqrt(dt)
    C, p = spec.C, spec.p
    linear = abs(p) < 1e-12

    def transition(t, s, c, z):
        xi, eta = s[:, :1], s[:, 1:]
        Z = c[:, 1:2] if t == 0 else c
        if t == 0:
            xi = c[:, :1]
        eta_plus = np.maximum(eta.data, 0.0)
        dw = z * sqdt
        r_t = co["r0"] + co["r1"] * eta_plus
        if linear:
            drift = xi * (r_t * dt) - C * dt
        else:
            drift = xi * (r_t * dt) - ad.power(ad.maximum(xi, 1e-12), p) * (C * dt)
        xi1 = xi + drift + Z * dw
        eta1 = eta_plus + (co["a0"] + co["a1"] * eta_plus) * dt + spec.beta_bar * np.sqrt(eta_plus) * dw
        eta1 = np.maximum(eta1, 0.0)
        return ad.concat([xi1, ad.Tensor(eta1)], axis=1)

    def path_utility(states, controls):
        return -ad.square(states[-1][:, 0] - 1.0)

    scale = 1.0 / spec.ybar if spec.ybar > 0 else 1.0

    def features(t, s):
        return s[:, 1:2] * scale

    return ProblemDefinition(
        name="heston", n_s=2, n_c=1, n_c0=2, n_z=1, T=spec.steps, s0=np.array([0.0, spec.y0]),
        transition=transition, path_utility=path_utility, features=features, n_features=1,
        c0_init=np.array([spec.xi0_init, 0.0]), hidden=list(spec.hidden), sign=-1.0, spec=spec,
    )


# ---------------------------------------------------------------------------
# finite-difference oracle
@dataclass
class PdeResult:
    value: float
    grid: np.ndarray
    g: np.ndarray
    ny: int
    nt: int
    change: float | None = None
    history: list[tuple[int, int, float]] = field(default_factory=list)


def _solve_pde(spec: HestonSpec, T: float, ny: int, nt: int, y_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward in time-to-maturity ``tau``: ``g_tau = L g + C g^p``, ``g(0, y) = 1``.

    Linear part by Crank-Nicolson, the power source by second-order
    Adams-Bashforth extrapolation.  Advection is central in the interior and
    one-sided at the ends (forward at ``y = 0`` where the diffusion vanishes,
    backward at ``y_max``).
    """
    y = np.linspace(0.0, y_max, ny + 1)
    h = y[1] - y[0]
    dtau = T / nt
    a = spec.alpha_tilde(y)
    D = 0.5 * spec.beta_bar ** 2 * y
    lo = np.zeros(ny + 1)
    di = np.zeros(ny + 1)
    up = np.zeros(ny + 1)
    lo[1:-1] = D[1:-1] / h ** 2 - a[1:-1] / (2 * h)
    up[1:-1] = D[1:-1] / h ** 2 + a[1:-1] / (2 * h)
    di[1:-1] = -2 * D[1:-1] / h ** 2
    di[0], up[0] = -a[0] / h, a[0] / h
    di[-1], lo[-1] = a[-1] / h, -a[-1] / h
    di = di - spec.r_tilde(y)

    ab = np.zeros((3, ny + 1))
    ab[0, 1:] = -0.5 * dtau * up[:-1]
    ab[1] = 1.0 - 0.5 * dtau * di
    ab[2, :-1] = -0.5 * dtau * lo[1:]

    def apply(v):
        out = di * v
        out[:-1] += up[:-1] * v[1:]
        out[1:] += lo[1:] * v[:-1]
        return out

    C, p = spec.C, spec.p
    g = np.ones(ny + 1)
    f_prev = None
    for _ in range(nt):
        f = C * np.maximum(g, 1e-300) ** p
        src = f if f_prev is None else 1.5 * f - 0.5 * f_prev
        g = solve_banded((1, 1), ab, g + 0.5 * dtau * apply(g) + dtau * src)
        f_prev = f
    if not np.all(np.isfinite(g)):
        raise ConvergenceError("finite-difference solution is not finite")
    return y, g


def _grid_for(y0: float, ny: int, y_max: float) -> float:
    """Stretch ``y_max`` slightly so ``y0`` falls on a grid node."""
    if y0 <= 0:
        return y_max
    j = max(1, int(round(y0 / y_max * ny)))
    return y0 * ny / j


def heston_pde_oracle(spec: HestonSpec, ny: int = 400, nt: int = 2000, y_max: float = 1.0,
                      T: float | None = None, tol: float = 1e-3, max_doublings: int = 3) -> PdeResult:
    """``g(0, y0)`` by finite differences, doubling space and time resolution until
    successive values differ by less than ``tol``."""
    if spec.diagnostics():
        raise ConfigurationError("; ".join(spec.diagnostics()))
    T = spec.T if T is None else T
    if not 0 <= spec.y0 < y_max:
        raise ConfigurationError("y0 must lie inside [0, y_max)")
    history = []
    prev = None
    for _ in range(max_doublings + 1):
        ym = _grid_for(spec.y0, ny, y_max)
        y, g = _solve_pde(spec, T, ny, nt, ym)
        value = float(np.interp(spec.y0, y, g))
        change = None if prev is None else abs(value - prev)
        history.append((ny, nt, value))
        if change is not None and change < tol:
            return PdeResult(value, y, g, ny, nt, change, history)
        prev = value
        ny, nt = 2 * ny, 2 * nt
    raise ConvergenceError(f"grid doubling did not settle below {tol}: {history}")


def heston_affine_oracle(spec: HestonSpec, T: float | None = None, y: float | None = None) -> float:
    """Exact ``g(0, y)`` for the linear case ``p = 0`` via the affine ansatz.

    The homogeneous part is ``exp(A(tau) + B(tau) y)`` with Riccati ODEs
    ``B' = -r1 + a1 B + b2 B^2 / 2``, ``A' = -r0 + a0 B``; the constant source
    adds ``C * int_0^T exp(A + B y) ds``.
    """
    if abs(spec.p) > 1e-12:
        raise ConfigurationError(f"affine oracle needs p = 0, got p = {spec.p}")
    T = spec.T if T is None else T
    y = spec.y0 if y is None else y
    c = spec.affine_coefficients()

    def rhs(tau, u):
        A, B = u
        return [-c["r0"] + c["a0"] * B, -c["r1"] + c["a1"] * B + 0.5 * c["b2"] * B * B]

    sol = solve_ivp(rhs, (0.0, T), [0.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14, dense_output=True)
    if not sol.success:
        raise ConvergenceError(sol.message)

    def e(s):
        A, B = sol.sol(s)
        return np.exp(A + B * y)

    integral, _ = quad(e, 0.0, T, epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(e(T) + spec.C * integral)


def heston_frozen_vol_value(spec: HestonSpec, T: float | None = None) -> float:
    """Closed form when volatility never moves (``beta_bar = 0``, ``y0`` at its drift's rest point).

    ``g' = -r g + C g^p`` is a Bernoulli equation; ``h = g^(1-p)`` is linear.
    """
    T = spec.T if T is None else T
    r = spec.r_tilde(spec.y0)
    q = 1.0 - spec.p
    if abs(r) < 1e-15:
        h = 1.0 + q * spec.C * T
    else:
        h = spec.C / r + (1.0 - spec.C / r) * np.exp(-q * r * T)
    return float(h ** (1.0 / q))
