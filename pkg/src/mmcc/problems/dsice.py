"""Climate-economy planner problem without tipping (annual steps).

State ``(K, M_AT, M_UO, M_LO, T_AT, T_OC, zeta, chi)``; controls
``(mu, p)`` with consumption ``C = p (1 - theta_1 mu^theta_2) Y``.  After the
horizon a deterministic tail (no emissions, fixed consumption-output ratio,
frozen population and productivity) supplies the terminal value; it is
rolled out inside the recorded graph so gradients see it.

Numeric defaults follow the usual annual calibration of this model family.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import autodiff as ad
from ..errors import ConfigurationError, InfeasibleStateError
from ..policy import SigmoidBoxHead
from ..simulate import FixedPolicy, ProblemDefinition, ShockStream, rollout

__all__ = ["DsiceSpec", "build_dsice", "dsice_reference_rollout", "dsice_path_diagnostics",
           "exogenous", "carbon_matrix", "heat_matrix", "ProductivityChain"]


@dataclass
class ProductivityChain:
    """Finite-state chain for ``zeta``; ``chi`` carries the current state index.

    ``transition[i, j]`` is the probability of moving from state ``i`` to
    ``j``.  Draws use one uniform per step, independent of controls.
    """

    values: tuple[float, ...] = (0.98, 1.0, 1.02)
    transition: tuple[tuple[float, ...], ...] = ((0.9, 0.1, 0.0), (0.05, 0.9, 0.05), (0.0, 0.1, 0.9))
    start: int = 1

    def cumulative(self) -> np.ndarray:
        P = np.asarray(self.transition, dtype=float)
        if P.shape != (len(self.values),) * 2 or np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-12):
            raise ConfigurationError("productivity transition must be a square stochastic matrix")
        return np.cumsum(P, axis=1)


@dataclass
class DsiceSpec:
    horizon: int = 600              # planning years
    tail: int = 400                 # years covered by the terminal value
    beta: float = float(np.exp(-0.015))
    psi: float = 1.5
    alpha: float = 0.3
    delta_K: float = 0.1
    K0: float = 137.0
    A0: float = 0.027
    alpha1: float = 0.0092
    alpha2: float = 0.001
    sigma0: float = 0.13418
    theta2: float = 2.8
    pi1: float = 0.0
    pi2: float = 0.0028388
    M0: tuple[float, float, float] = (808.9, 1255.0, 18365.0)
    phi12: float = 0.0189288
    phi21: float = 0.0097213
    phi23: float = 0.005
    phi32: float = 0.0003119
    xi1: float = 0.037
    xi2: float = 0.047
    heat21: float = 0.01
    heat12: float = 0.0048
    eta: float = 3.8
    M_star: float = 596.4
    T0: tuple[float, float] = (0.7307, 0.0068)
    land0: float = 1.1
    land_zero_year: float = 100.0
    tail_consumption_ratio: float = 0.78
    control_box: tuple[float, float] = (1e-6, 1.0 - 1e-6)
    productivity: ProductivityChain | None = None
    hidden: tuple[int, ...] = (32, 32)
    c0_init: tuple[float, float] = (0.0, 0.0)

    def diagnostics(self) -> list[str]:
        out = []
        for name in ("phi12", "phi21", "phi23", "phi32", "heat21", "heat12"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                out.append(f"{name} must lie in [0, 1]")
        if self.phi21 + self.phi23 > 1:
            out.append("phi21 + phi23 must not exceed 1")
        if self.horizon < 1 or self.tail < 0:
            out.append("horizon must be >= 1 and tail >= 0")
        if not self.K0 > 0:
            out.append("K0 must be positive")
        if not 0 < self.alpha < 1:
            out.append("alpha must lie in (0, 1)")
        if self.psi <= 0 or self.psi == 1:
            out.append("psi must be positive and != 1")
        lo, hi = self.control_box
        if not 0 < lo < hi < 1:
            out.append("control box must sit strictly inside (0, 1)")
        if self.productivity is not None:
            try:
                self.productivity.cumulative()
            except ConfigurationError as exc:
                out.append(str(exc))
        return out


def carbon_matrix(spec: DsiceSpec) -> np.ndarray:
    p12, p21, p23, p32 = spec.phi12, spec.phi21, spec.phi23, spec.phi32
    return np.array([
        [1 - p12, p21, 0.0],
        [p12, 1 - p21 - p23, p32],
        [0.0, p23, 1 - p32],
    ])


def heat_matrix(spec: DsiceSpec) -> np.ndarray:
    return np.array([
        [1 - spec.heat21 - spec.xi2, spec.heat12],
        [spec.heat21, 1 - spec.heat12],
    ])


def exogenous(spec: DsiceSpec, t) -> dict[str, np.ndarray]:
    """Time-indexed exogenous series at (array of) years ``t``."""
    t = np.asarray(t, dtype=float)
    sigma = spec.sigma0 * np.exp(-0.0073 * (1 - np.exp(-0.003 * t)) / 0.003)
    return {
        "F_EX": np.where(t <= 100, -0.06 + 0.0036 * t, 0.3),
        "L": 6514 * np.exp(-0.035 * t) + 8600 * (1 - np.exp(-0.035 * t)),
        "A": spec.A0 * np.exp(spec.alpha1 * (1 - np.exp(-spec.alpha2 * t)) / spec.alpha2),
        "sigma": sigma,
        "theta1": 1.17 * sigma * (1 + np.exp(-0.005 * t)) / (2 * spec.theta2),
        "E_land": spec.land0 * np.clip(1 - t / spec.land_zero_year, 0.0, None),
    }


def build_dsice(spec: DsiceSpec | None = None) -> ProblemDefinition:
    spec = spec or DsiceSpec()
    if spec.diagnostics():
        raise ConfigurationError("; ".join(spec.diagnostics()))
    H = spec.horizon
    ex = exogenous(spec, np.arange(H + spec.tail + 1))
    PhiM, PhiT = carbon_matrix(spec), heat_matrix(spec)
    rho = 1.0 - 1.0 / spec.psi
    disc = spec.beta ** np.arange(H + 1)
    chain = spec.productivity
    cum = chain.cumulative() if chain is not None else None
    zeta_vals = np.asarray(chain.values) if chain is not None else None

    a_t = ex["A"] * ex["L"] ** (1 - spec.alpha)
    fx = spec.eta / np.log(2.0)

    def produce(t, s, c):
        """Output, consumption and the pieces their derivatives need (plain arrays)."""
        K, T1, zeta = s[:, 0], s[:, 4], s[:, 6]
        mu, p = c[:, 0], c[:, 1]
        kz = K ** spec.alpha * a_t[t]
        f = kz * zeta
        D = 1.0 + spec.pi1 * T1 + spec.pi2 * T1 * T1
        Y = f / D
        ab = ex["theta1"][t] * mu ** spec.theta2
        net = (1.0 - ab) * Y
        # partials of Y with respect to K, T_AT, zeta
        dY = (spec.alpha * Y / K, -Y * (spec.pi1 + 2 * spec.pi2 * T1) / D, kz / D)
        dab = ex["theta1"][t] * spec.theta2 * mu ** (spec.theta2 - 1)
        return f, kz, Y, dY, ab, dab, net, mu, p

    def transition(t, s, c, z):
        sd, cd = s.data, c.data
        f, kz, Y, dY, ab, dab, net, mu, p = produce(t, sd, cd)
        K, M, Tmp = sd[:, 0], sd[:, 1:4], sd[:, 4:6]
        out = np.empty_like(sd)
        out[:, 0] = (1.0 - spec.delta_K) * K + (1.0 - p) * net
        E = f * (1.0 - mu) * ex["sigma"][t] + ex["E_land"][t]
        out[:, 1:4] = M @ PhiM.T
        out[:, 1] += E
        out[:, 4:6] = Tmp @ PhiT.T
        out[:, 4] += spec.xi1 * (fx * np.log(M[:, 0] / spec.M_star) + ex["F_EX"][t])
        if chain is None:
            out[:, 6:8] = sd[:, 6:8]
        else:
            idx = sd[:, 7].astype(int)
            nxt = (z[:, :1] > cum[idx]).sum(axis=1)
            out[:, 6] = zeta_vals[nxt]
            out[:, 7] = nxt

        def vjp(g):
            gK1, gE, gT = g[:, 0], g[:, 1], g[:, 4:6]
            gs = np.zeros_like(sd)
            gc = np.zeros_like(cd)
            w = gK1 * (1.0 - p) * (1.0 - ab)          # cotangent reaching Y through investment
            eK = (1.0 - mu) * ex["sigma"][t]           # dE/df
            gs[:, 0] = gK1 * (1.0 - spec.delta_K) + w * dY[0] + gE * eK * spec.alpha * f / K
            gs[:, 1:4] = g[:, 1:4] @ PhiM
            gs[:, 1] += gT[:, 0] * spec.xi1 * fx / M[:, 0]
            gs[:, 4:6] = gT @ PhiT
            gs[:, 4] += w * dY[1]
            gs[:, 6] = w * dY[2] + gE * eK * kz
            if chain is None:
                gs[:, 6:8] += g[:, 6:8]
            gc[:, 0] = -gK1 * (1.0 - p) * Y * dab - gE * f * ex["sigma"][t]
            gc[:, 1] = -gK1 * net
            return gs, gc
        return ad.custom(out, (s, c), vjp)

    def period_utility(t, sd, cd):
        f, kz, Y, dY, ab, dab, net, mu, p = produce(t, sd, cd)
        L = ex["L"][t]
        C = p * net
        u = (C / L) ** rho * (L / rho) * disc[t]
        du = (C / L) ** (rho - 1.0) * disc[t]            # d u / d C
        gs = np.zeros_like(sd)
        gs[:, 0] = p * (1.0 - ab) * dY[0]
        gs[:, 4] = p * (1.0 - ab) * dY[1]
        gs[:, 6] = p * (1.0 - ab) * dY[2]
        gc = np.stack([-p * Y * dab, net], axis=1)
        return u, du[:, None] * gs, du[:, None] * gc

    def terminal_value(s):
        """Deterministic tail from year ``H`` through ``H + tail``, discounted to year ``H``."""
        sd = s.data
        L, a = ex["L"][H], a_t[H]
        r = spec.tail_consumption_ratio
        K, M, Tmp, zeta = sd[:, 0].copy(), sd[:, 1:4].copy(), sd[:, 4:6].copy(), sd[:, 6]
        n = spec.tail + 1
        Ks, Ys, Ds, T1s, Ms = [], [], [], [], []
        total = np.zeros(sd.shape[0])
        for j in range(n):
            D = 1.0 + spec.pi1 * Tmp[:, 0] + spec.pi2 * Tmp[:, 0] ** 2
            Y = K ** spec.alpha * zeta * a / D
            total += (r * Y / L) ** rho * (L / rho) * spec.beta ** j
            Ks.append(K); Ys.append(Y); Ds.append(D); T1s.append(Tmp[:, 0]); Ms.append(M[:, 0])
            if j == n - 1:
                break
            K = K * (1.0 - spec.delta_K) + Y * (1.0 - r)
            push = spec.xi1 * (fx * np.log(M[:, 0] / spec.M_star) + ex["F_EX"][H + j])
            Tmp = Tmp @ PhiT.T
            Tmp[:, 0] += push
            M = M @ PhiM.T

        def vjp(g):
            gK = np.zeros_like(total)
            gT = np.zeros((sd.shape[0], 2))
            gM = np.zeros((sd.shape[0], 3))
            gz = np.zeros_like(total)
            for j in range(n - 1, -1, -1):
                K, Y, D, T1 = Ks[j], Ys[j], Ds[j], T1s[j]
                if j < n - 1:
                    # back through the step j -> j + 1
                    gM = gM @ PhiM
                    gM[:, 0] += gT[:, 0] * spec.xi1 * fx / Ms[j]
                    gT = gT @ PhiT
                    gY = gK * (1.0 - r)
                    gK = gK * (1.0 - spec.delta_K)
                else:
                    gY = np.zeros_like(total)
                gY = gY + g * spec.beta ** j * r * (r * Y / L) ** (rho - 1.0)
                gK = gK + gY * spec.alpha * Y / K
                gT[:, 0] += -gY * Y * (spec.pi1 + 2 * spec.pi2 * T1) / D
                gz += gY * Y / zeta
            gs = np.zeros_like(sd)
            gs[:, 0], gs[:, 1:4], gs[:, 4:6], gs[:, 6] = gK, gM, gT, gz
            return (gs,)
        return ad.custom(total, (s,), vjp)

    def reward(t, s_next, s, c):
        u, gs, gc = period_utility(t, s.data, c.data)
        out = ad.custom(u, (s, c), lambda g: (g[:, None] * gs, g[:, None] * gc))
        if t == H - 1:
            out = out + terminal_value(s_next) * disc[H]
        return out

    def check_state(t, s):
        bad = np.flatnonzero(s[:, 0] <= 0)
        if bad.size:
            raise InfeasibleStateError(f"non-positive capital at year {t}, path {int(bad[0])}")

    scale = np.array([spec.K0, *spec.M0, 1.0, 1.0, 1.0, 1.0])

    def features(t, s):
        return s * (1.0 / scale)

    if chain is None:
        n_z, sampler = 0, None
        zeta0, chi0 = 1.0, 0.0
    else:
        n_z = 1
        zeta0, chi0 = float(chain.values[chain.start]), float(chain.start)

        def sampler(gen, size, n_z_, t):
            return gen.random((size, 1))

    s0 = np.array([spec.K0, *spec.M0, *spec.T0, zeta0, chi0])
    kw = {} if sampler is None else {"shock_sampler": sampler}
    return ProblemDefinition(
        name="dsice", n_s=8, n_c=2, n_z=n_z, T=H, s0=s0, transition=transition, reward=reward,
        head=SigmoidBoxHead([spec.control_box[0]] * 2, [spec.control_box[1]] * 2),
        features=features, n_features=8, c0_init=np.asarray(spec.c0_init, dtype=float),
        hidden=list(spec.hidden), check_state=check_state, spec=spec, **kw,
    )


def dsice_reference_rollout(spec: DsiceSpec, mu: float, p: float) -> float:
    """Objective of the constant policy ``(mu, p)`` on the deterministic instance."""
    if not (0 < mu < 1 and 0 < p < 1):
        raise ConfigurationError("constant controls must lie strictly inside (0, 1)")
    det = replace(spec, productivity=None)
    problem = build_dsice(det)
    const = np.array([[mu, p]])
    policy = FixedPolicy(lambda t, s: ad.Tensor(np.repeat(const, s.data.shape[0], axis=0)), "constant")
    stream = ShockStream(problem, 0, (0,), 1)
    ro = rollout(problem, policy, 0, problem.s0[None, :], stream)
    return float(np.sum(np.stack([r.data for r in ro.rewards], axis=1), axis=1)[0])


def dsice_path_diagnostics(spec: DsiceSpec, states: np.ndarray, controls: list[np.ndarray]) -> dict:
    """Count feasibility violations on simulated paths (states (N, H+1, 8))."""
    ex = exogenous(spec, np.arange(spec.horizon))
    K = states[:, :-1, 0]
    T_at = states[:, :-1, 4]
    zeta = states[:, :-1, 6]
    mu = np.stack([c[:, 0] for c in controls], axis=1)
    p = np.stack([c[:, 1] for c in controls], axis=1)
    f = zeta * ex["A"] * K ** spec.alpha * ex["L"] ** (1 - spec.alpha)
    Y = f / (1 + spec.pi1 * T_at + spec.pi2 * T_at ** 2)
    net = (1 - ex["theta1"] * mu ** spec.theta2) * Y
    C = p * net
    return {
        "consumption_violations": int(np.sum(~((C > 0) & (C < net)))),
        "carbon_violations": int(np.sum(states[:, :, 1:4] < 0)),
        "control_violations": int(np.sum(~((mu > 0) & (mu < 1) & (p > 0) & (p < 1)))),
        "capital_violations": int(np.sum(states[:, :, 0] <= 0)),
    }
