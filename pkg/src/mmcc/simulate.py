"""Path simulation under a policy, objective estimates, and suffix-objective gradients.

Shocks come from :class:`ShockStream`, a counter-style generator: the shock
array for time step ``j`` of a stream is a pure function of
``(seed, key, j)``, and path ``r`` always reads row ``r`` of it.  Any path
segment can therefore be regenerated in isolation, and a suffix simulated
from cached prefix states reproduces the tail of a full simulation exactly
when it reads the same stream.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .errors import ContractError, NonFiniteUtilityError, PathBlowupError
from .policy import Head, IdentityHead, PolicyStack

log = logging.getLogger(__name__)

__all__ = [
    "ProblemDefinition", "ShockStream", "TrajectoryBatch", "ObjectiveEstimate", "Rollout",
    "rollout", "simulate_full", "simulate_suffix", "estimate_objective",
    "suffix_objective_and_gradient", "export_batch_csv", "FixedPolicy", "standard_normal_shocks",
    "TRAIN", "SUFFIX", "EVAL", "HOLDOUT",
]

# stream purposes, first element of every stream key
TRAIN, SUFFIX, EVAL, HOLDOUT = 1, 2, 3, 4


def standard_normal_shocks(gen: np.random.Generator, size: int, n_z: int, t: int) -> np.ndarray:
    return gen.standard_normal((size, n_z))


def _identity_features(t, s):
    return s


@dataclass
class ProblemDefinition:
    """Everything the trainer needs to know about a control problem.

    ``transition(t, s, c, z)`` maps period-``t`` states/controls and the
    shock ``z_{t+1}`` to ``s_{t+1}`` using differentiable tensor operations.
    Exactly one of ``reward`` (time-separable, ``reward(t, s_next, s, c)``
    returning per-path values) and ``path_utility`` (general,
    ``path_utility(states, controls)``) must be given.
    """

    name: str
    n_s: int
    n_c: int
    n_z: int
    T: int
    s0: np.ndarray
    transition: Callable
    reward: Callable | None = None
    path_utility: Callable | None = None
    head: Head = field(default_factory=IdentityHead)
    head0: Head | None = None
    n_c0: int | None = None
    features: Callable = _identity_features
    n_features: int | None = None
    shock_sampler: Callable = standard_normal_shocks
    c0_init: np.ndarray | None = None
    hidden: list[int] | None = None
    sign: float = 1.0
    check_state: Callable | None = None
    spec: Any = None

    def __post_init__(self):
        if (self.reward is None) == (self.path_utility is None):
            raise ContractError("give exactly one of reward (time-separable) or path_utility (general)")
        if self.T < 1:
            raise ContractError("horizon T must be >= 1")
        self.s0 = np.asarray(self.s0, dtype=float)
        if self.s0.shape != (self.n_s,):
            raise ContractError(f"s0 has shape {self.s0.shape}, expected ({self.n_s},)")
        if self.n_c0 is None:
            self.n_c0 = self.n_c
        if self.head0 is None:
            self.head0 = self.head
        if self.n_features is None:
            self.n_features = self.n_s

    @property
    def separable(self) -> bool:
        return self.reward is not None

    def general_utility(self, states: Sequence[Tensor], controls: Sequence[Tensor]) -> Tensor:
        """Whole-path utility; for separable problems the sum of period rewards in time order."""
        if self.path_utility is not None:
            return self.path_utility(states, controls)
        total = None
        for j in range(self.T):
            r = self.reward(j, states[j + 1], states[j], controls[j])
            total = r if total is None else total + r
        return total


class ShockStream:
    """Reproducible shocks keyed by ``(seed, key, time step)``.

    ``n_rows`` is the number of paths in the stream; ``draw(j, rows)``
    returns the rows of the step-``j`` array (the shock ``z_{j+1}``).
    """

    def __init__(self, problem: ProblemDefinition, seed: int, key: tuple[int, ...], n_rows: int,
                 cache: bool = False):
        self.problem = problem
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.n_rows = int(n_rows)
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def _generate(self, j: int) -> np.ndarray:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key + (j,))
        gen = np.random.Generator(np.random.Philox(ss))
        z = self.problem.shock_sampler(gen, self.n_rows, self.problem.n_z, j)
        return np.asarray(z, dtype=float).reshape(self.n_rows, self.problem.n_z)

    def draw(self, j: int, rows=None) -> np.ndarray:
        if self.problem.n_z == 0:
            n = self.n_rows if rows is None else len(np.arange(self.n_rows)[rows])
            return np.zeros((n, 0))
        if self._cache is not None:
            z = self._cache.get(j)
            if z is None:
                z = self._cache[j] = self._generate(j)
        else:
            z = self._generate(j)
        return z if rows is None else z[rows]


@dataclass
class ObjectiveEstimate:
    mean: float
    se: float
    n: int

    @property
    def se_defined(self) -> bool:
        return self.n >= 2


@dataclass
class TrajectoryBatch:
    """Simulated paths from period ``t0`` to ``T``.

    ``states`` is (N, T - t0 + 1, n_s); ``controls[k]`` holds period
    ``t0 + k`` controls, (N, width) (period 0 may be wider than later ones).
    """

    t0: int
    states: np.ndarray
    controls: list[np.ndarray]
    rewards: np.ndarray | None
    path_values: np.ndarray | None
    seed: int
    stream_key: tuple[int, ...]
    fingerprint: str | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


@dataclass
class Rollout:
    states: list[Tensor]
    controls: list[Tensor]
    rewards: list[Tensor] | None


class FixedPolicy:
    """Wrap ``fn(t, s) -> Tensor`` as a policy (used for closed-form baselines)."""

    def __init__(self, fn: Callable, name: str = "fixed"):
        self.fn = fn
        self.name = name

    def control(self, t: int, s: Tensor) -> Tensor:
        return self.fn(t, s)

    def fingerprint(self) -> str:
        return self.name


def _check_finite(s: Tensor, period: int, rows) -> None:
    d = s.data
    if not np.isfinite(d).all():
        bad = int(np.flatnonzero(~np.isfinite(d).all(axis=1))[0])
        if isinstance(rows, slice):
            bad = (rows.start or 0) + bad * (rows.step or 1)
        elif rows is not None:
            bad = int(np.asarray(rows)[bad])
        raise PathBlowupError(period, bad)


def rollout(problem: ProblemDefinition, policy, t0: int, start, stream: ShockStream, rows=None,
            with_rewards: bool = True) -> Rollout:
    """Simulate from period ``t0`` to ``T`` starting at ``start`` (B, n_s).

    Runs on tensors, so inside an active :class:`Graph` every step is
    recorded and gradients flow through controls and later states alike.
    """
    if not 0 <= t0 < problem.T:
        raise ContractError(f"start period {t0} outside 0..{problem.T - 1}")
    s = start if isinstance(start, Tensor) else Tensor(start)
    if s.data.ndim != 2 or s.data.shape[1] != problem.n_s:
        raise ContractError(f"start states must be (B, {problem.n_s}), got {s.data.shape}")
    if not np.isfinite(s.data).all():
        raise ContractError("start states must be finite")
    states, controls = [s], []
    rewards = [] if (with_rewards and problem.separable) else None
    for j in range(t0, problem.T):
        c = policy.control(j, s)
        z = stream.draw(j, rows)
        s_next = problem.transition(j, s, c, z)
        _check_finite(s_next, j + 1, rows)
        if problem.check_state is not None:
            problem.check_state(j + 1, s_next.data)
        if rewards is not None:
            rewards.append(problem.reward(j, s_next, s, c))
        states.append(s_next)
        controls.append(c)
        s = s_next
    return Rollout(states, controls, rewards)


def _fingerprint(policy) -> str | None:
    fp = getattr(policy, "fingerprint", None)
    return fp() if callable(fp) else None


def _pack(problem, ro: Rollout, t0: int, stream: ShockStream, policy, path_values=None) -> TrajectoryBatch:
    states = np.stack([s.data for s in ro.states], axis=1)
    controls = [c.data.copy() for c in ro.controls]
    rewards = None
    if ro.rewards is not None:
        rewards = np.stack([r.data for r in ro.rewards], axis=1)
    return TrajectoryBatch(t0, states, controls, rewards, path_values, stream.seed, stream.key,
                           _fingerprint(policy))


def simulate_full(problem: ProblemDefinition, policy, N: int, seed: int,
                  key: tuple[int, ...] = (TRAIN, 0), stream: ShockStream | None = None) -> TrajectoryBatch:
    """``N`` paths from ``s0`` to ``s_T``; deterministic given ``(seed, key)``."""
    if N < 1:
        raise ContractError("N must be >= 1")
    stream = stream or ShockStream(problem, seed, key, N)
    start = np.broadcast_to(problem.s0, (N, problem.n_s)).copy()
    ro = rollout(problem, policy, 0, start, stream)
    path_values = None
    if not problem.separable:
        path_values = problem.path_utility(ro.states, ro.controls).data.copy()
    return _pack(problem, ro, 0, stream, policy, path_values)


def simulate_suffix(problem: ProblemDefinition, policy, start_states: np.ndarray, t: int, seed: int,
                    key: tuple[int, ...] = (TRAIN, 0), rows=None,
                    stream: ShockStream | None = None) -> TrajectoryBatch:
    """Paths from cached period-``t`` states to ``T`` under the current policy.

    ``rows`` selects which stream rows (paths) the start states correspond
    to; by default rows ``0..B-1`` of a stream with ``B`` paths.
    """
    start_states = np.asarray(start_states, dtype=float)
    if stream is None:
        if rows is None:
            n_rows = start_states.shape[0]
        elif isinstance(rows, slice):
            n_rows = rows.stop
        else:
            n_rows = int(np.max(rows)) + 1
        stream = ShockStream(problem, seed, key, n_rows)
    ro = rollout(problem, policy, t, start_states, stream, rows)
    return _pack(problem, ro, t, stream, policy)


def _path_totals(problem: ProblemDefinition, batch: TrajectoryBatch) -> np.ndarray:
    if problem.separable:
        return np.sum(batch.rewards, axis=1)
    return batch.path_values


def estimate_objective(problem: ProblemDefinition, batch: TrajectoryBatch, stack=None) -> ObjectiveEstimate:
    """Mean and standard error (sample sd / sqrt(N)) of the whole-path objective."""
    if batch.t0 != 0:
        raise ContractError("objective estimates need a batch that starts at period 0")
    if stack is not None and batch.fingerprint is not None and _fingerprint(stack) != batch.fingerprint:
        raise ContractError("batch was generated by a different policy")
    totals = _path_totals(problem, batch)
    return summarize(totals)


def summarize(totals: np.ndarray) -> ObjectiveEstimate:
    totals = np.asarray(totals, dtype=float)
    bad = ~np.isfinite(totals)
    if bad.any():
        raise NonFiniteUtilityError(int(np.flatnonzero(bad)[0]))
    n = totals.size
    mean = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / np.sqrt(n)) if n >= 2 else float("nan")
    return ObjectiveEstimate(mean, se, n)


def suffix_objective_and_gradient(problem: ProblemDefinition, stack: PolicyStack, t: int,
                                  prefix_states: np.ndarray, stream: ShockStream, rows=None, *,
                                  general: bool = False, prefix_path: tuple | None = None
                                  ) -> tuple[float, np.ndarray]:
    """Minibatch realization of the period-``t`` subproblem and its gradient.

    Time-separable mode averages the suffix reward sums ``sum_{j>=t} u_{j+1}``;
    general mode evaluates the whole-path utility on the path spliced from
    ``prefix_path = (states[0..t-1], controls[0..t-1])`` (numpy, per path)
    and the freshly simulated suffix.  The gradient is with respect to the
    flattened period-``t`` parameters (c0 when ``t == 0``) and flows through
    every later state.
    """
    prefix_states = np.asarray(prefix_states, dtype=float)
    if prefix_states.ndim != 2 or prefix_states.shape[0] < 1:
        raise ContractError("minibatch must hold at least one prefix state")
    with stack.trainable(t) as params, Graph() as g:
        ro = rollout(problem, stack, t, prefix_states, stream, rows, with_rewards=not general)
        if general:
            pre_s, pre_c = prefix_path if prefix_path is not None else ([], [])
            if len(pre_s) != t or len(pre_c) != t:
                raise ContractError(f"general mode at period {t} needs {t} prefix states and controls")
            states = [Tensor(x) for x in pre_s] + ro.states
            controls = [Tensor(x) for x in pre_c] + ro.controls
            per_path = problem.general_utility(states, controls)
        else:
            per_path = ro.rewards[0]
            for r in ro.rewards[1:]:
                per_path = per_path + r
        value = per_path.mean()
        if not np.isfinite(value.data):
            bad = np.flatnonzero(~np.isfinite(per_path.data))
            raise NonFiniteUtilityError(int(bad[0]) if bad.size else -1)
        if value._node is None:
            grads = {}
        else:
            grads = g.backward(value)
    vec = np.concatenate([grads.get(p, np.zeros_like(p.data)).ravel() for p in params])
    return float(value.data), vec


def export_batch_csv(problem: ProblemDefinition, batch: TrajectoryBatch, path) -> None:
    """Columnar dump: ``path, t, s_0..s_{n_s-1}, c_0..c_{k-1}`` (controls blank at t = T)."""
    width = max((c.shape[1] for c in batch.controls), default=0)
    n_s = batch.states.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t"] + [f"s{i}" for i in range(n_s)] + [f"c{i}" for i in range(width)])
        periods = batch.states.shape[1]
        for p in range(batch.n_paths):
            for k in range(periods):
                row = [p, batch.t0 + k] + [repr(float(x)) for x in batch.states[p, k]]
                if k < len(batch.controls):
                    cvals = [repr(float(x)) for x in batch.controls[k][p]]
                    row += cvals + [""] * (width - len(cvals))
                else:
                    row += [""] * width
                w.writerow(row)
