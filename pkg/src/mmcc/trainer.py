"""Backward-sweep trainer with monotone accept/reject.

Each sweep simulates ``N`` training paths under the incumbent stack, then
updates period ``T-1`` down to ``1`` and finally ``c0``.  A period update
runs ``m`` Adam steps on the suffix objective (minibatch ``i`` starts from
rows ``i*b .. (i+1)*b`` of the cached period-``t`` states and draws fresh
suffix shocks), and the candidate replaces the incumbent only if it scores
strictly higher on a fixed evaluation set of ``N_eval`` paths.

The evaluation set is shared by every comparison of the run.  Incumbent
per-path utilities, states and controls on it are cached; a candidate for
period ``t`` reuses rows for periods before ``t`` and re-simulates the rest,
so both sides of every comparison see identical shocks and identical
prefix arithmetic.  The accepted objective sequence is therefore
non-decreasing exactly, not just in expectation.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericalFailure, PeriodUpdateAborted
from .optim import AdamState, run_minibatch_ascent
from .policy import PolicyStack, clone_period, evaluate, restore_period
from .simulate import (EVAL, HOLDOUT, SUFFIX, TRAIN, ObjectiveEstimate, ProblemDefinition, ShockStream,
                       rollout, simulate_full, suffix_objective_and_gradient, summarize)

log = logging.getLogger(__name__)

__all__ = ["TrainerConfig", "PeriodRecord", "SweepReport", "Trainer", "sweep", "sweep_general", "train",
           "write_sweep_csv", "SWEEP_CSV_COLUMNS"]

SWEEP_CSV_COLUMNS = ["sweep", "period", "accepted", "eval_mean", "eval_se", "seconds"]


@dataclass
class TrainerConfig:
    N: int = 1024
    b: int = 32
    m: int = 32
    lr: float = 0.01
    lr_decay: float = 1.0
    lr_min: float = 0.0
    K: int = 10
    tol_rel: float = 1e-3
    N_eval: int = 1024
    seed: int = 0

    def diagnostics(self) -> list[str]:
        out = []
        if self.b * self.m != self.N:
            out.append(f"b*m != N ({self.b}*{self.m} = {self.b * self.m}, N = {self.N})")
        if self.b < 1 or self.m < 1:
            out.append("b and m must be >= 1")
        if self.N_eval < 2:
            out.append("N_eval must be >= 2 (standard errors need two paths)")
        if self.K < 1:
            out.append("K must be >= 1")
        if not self.lr > 0:
            out.append("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            out.append("lr_decay must lie in (0, 1]")
        if self.tol_rel < 0:
            out.append("tol_rel must be non-negative")
        return out

    def learning_rate(self, k: int) -> float:
        """Adam step size for sweep ``k`` (1-based): geometric decay, floored at ``lr_min``."""
        return max(self.lr * self.lr_decay ** (k - 1), self.lr_min)

    def validate(self) -> None:
        diags = self.diagnostics()
        if diags:
            raise ContractError("; ".join(diags))


@dataclass
class PeriodRecord:
    period: int
    accepted: bool
    eval_mean: float
    eval_se: float
    seconds: float
    candidate_mean: float | None = None
    error: str | None = None


@dataclass
class SweepReport:
    sweep: int
    start_mean: float
    end_mean: float
    end_se: float
    periods: list[PeriodRecord] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def accepted(self) -> dict[int, bool]:
        return {p.period: p.accepted for p in self.periods}

    @property
    def n_accepted(self) -> int:
        return sum(p.accepted for p in self.periods)


@dataclass
class _EvalCache:
    states: list[np.ndarray]        # periods 0..T, each (N_eval, n_s)
    controls: list[np.ndarray]      # periods 0..T-1
    rewards: np.ndarray | None      # (N_eval, T), separable problems only
    totals: np.ndarray              # per-path objective
    estimate: ObjectiveEstimate


class Trainer:
    """Owns a stack and runs sweeps on it in place.

    ``general=True`` forces whole-path (general-utility) subproblems even for
    separable problems; problems declared with a path utility always use
    them.
    """

    def __init__(self, problem: ProblemDefinition, stack: PolicyStack, config: TrainerConfig,
                 general: bool | None = None, on_period: Callable[[int, PeriodRecord], None] | None = None):
        config.validate()
        if stack.T != problem.T:
            raise ContractError(f"stack has {stack.T} periods, problem has {problem.T}")
        self.problem = problem
        self.stack = stack
        self.config = config
        self.general = (not problem.separable) if general is None else bool(general)
        if not problem.separable and not self.general:
            raise ContractError("a problem with a whole-path utility can only be trained in general mode")
        self.on_period = on_period
        self.eval_stream = ShockStream(problem, config.seed, (EVAL,), config.N_eval, cache=True)
        self.audit: list[tuple[int, int, str]] = []
        self.reports: list[SweepReport] = []
        self.history: list[float] = []
        self.history_se: list[float] = []
        self.c0_history: list[float] = []
        self.sweeps_done = 0
        self._stall = 0
        self._cache: _EvalCache | None = None

    # evaluation -----------------------------------------------------------------
    def _totals(self, states, controls, rewards) -> np.ndarray:
        if self.problem.separable:
            return np.sum(rewards, axis=1)
        return self.problem.path_utility([Tensor(s) for s in states], [Tensor(c) for c in controls]).data.copy()

    def _evaluate_from(self, t: int, base: _EvalCache | None) -> _EvalCache:
        p = self.problem
        if t == 0:
            start = np.broadcast_to(p.s0, (self.config.N_eval, p.n_s)).copy()
        else:
            start = base.states[t]
        ro = rollout(p, self.stack, t, start, self.eval_stream)
        new_states = [s.data for s in ro.states]
        new_controls = [c.data for c in ro.controls]
        states = (base.states[:t] if t else []) + new_states
        controls = (base.controls[:t] if t else []) + new_controls
        rewards = None
        if p.separable:
            tail = np.stack([r.data for r in ro.rewards], axis=1)
            rewards = np.concatenate([base.rewards[:, :t], tail], axis=1) if t else tail
        totals = self._totals(states, controls, rewards)
        return _EvalCache(states, controls, rewards, totals, summarize(totals))

    def incumbent(self) -> ObjectiveEstimate:
        if self._cache is None:
            self._cache = self._evaluate_from(0, None)
            if not self.history:
                self._record_history()
        return self._cache.estimate

    def _record_history(self) -> None:
        est = self._cache.estimate
        self.history.append(est.mean)
        self.history_se.append(est.se)
        self.c0_history.append(float(evaluate(self.stack, 0, self.problem.s0[None, :]).data[0, 0]))

    def eval_paths(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Incumbent states (periods 0..T) and controls (0..T-1) on the evaluation set."""
        self.incumbent()
        return self._cache.states, self._cache.controls

    def eval_states(self) -> list[np.ndarray]:
        self.incumbent()
        return self._cache.states

    def holdout(self, n: int, seed: int | None = None) -> ObjectiveEstimate:
        """Estimate on independent paths, never used for acceptance."""
        seed = self.config.seed if seed is None else seed
        stream = ShockStream(self.problem, seed, (HOLDOUT,), n)
        batch = simulate_full(self.problem, self.stack, n, seed, stream=stream)
        totals = np.sum(batch.rewards, axis=1) if self.problem.separable else batch.path_values
        return summarize(totals)

    # one period -------------------------------------------------------------------
    def _period_update(self, k: int, t: int, train_states, train_controls) -> PeriodRecord:
        cfg, p = self.config, self.problem
        t_start = time.perf_counter()
        incumbent = self._cache.estimate
        saved = clone_period(self.stack, t)
        self.audit.append((k, t, "begin"))

        def objective(i: int, params: np.ndarray):
            restore_period(self.stack, t, params)
            rows = slice(i * cfg.b, (i + 1) * cfg.b)
            if t == 0:
                start = np.broadcast_to(p.s0, (cfg.b, p.n_s)).copy()
                prefix = ([], [])
            else:
                start = train_states[t][rows]
                prefix = ([s[rows] for s in train_states[:t]], [c[rows] for c in train_controls[:t]])
            stream = ShockStream(p, cfg.seed, (SUFFIX, k, t, i), cfg.b)
            return suffix_objective_and_gradient(p, self.stack, t, start, stream, general=self.general,
                                                 prefix_path=prefix if self.general else None)

        candidate_mean = None
        error = None
        accepted = False
        try:
            result = run_minibatch_ascent(objective, saved.copy(), AdamState.fresh(saved.size, lr=cfg.learning_rate(k)), cfg.m)
            restore_period(self.stack, t, result.params)
            cand = self._evaluate_from(t, self._cache)
            candidate_mean = cand.estimate.mean
            accepted = cand.estimate.mean > incumbent.mean
        except (PeriodUpdateAborted, NumericalFailure) as exc:
            error = str(exc)
            log.warning("sweep %d period %d rejected: %s", k, t, exc)
        if accepted:
            self._cache = cand
            self.audit.append((k, t, "write"))
        else:
            restore_period(self.stack, t, saved)
            self.audit.append((k, t, "restore"))
        est = self._cache.estimate
        rec = PeriodRecord(t, accepted, est.mean, est.se, time.perf_counter() - t_start, candidate_mean, error)
        if self.on_period is not None:
            self.on_period(k, rec)
        return rec

    # sweeps -------------------------------------------------------------------------
    def sweep(self, k: int | None = None) -> SweepReport:
        k = self.sweeps_done + 1 if k is None else k
        t0 = time.perf_counter()
        start = self.incumbent()
        batch = simulate_full(self.problem, self.stack, self.config.N, self.config.seed, key=(TRAIN, k))
        states = [batch.states[:, j, :] for j in range(batch.states.shape[1])]
        controls = batch.controls
        report = SweepReport(k, start.mean, start.mean, start.se)
        for t in list(range(self.problem.T - 1, 0, -1)) + [0]:
            report.periods.append(self._period_update(k, t, states, controls))
        est = self._cache.estimate
        report.end_mean, report.end_se = est.mean, est.se
        report.seconds = time.perf_counter() - t0
        self.reports.append(report)
        self._record_history()
        self.sweeps_done = k
        log.info("sweep %d: %.6g -> %.6g (%d/%d accepted, %.1fs)", k, start.mean, est.mean,
                 report.n_accepted, len(report.periods), report.seconds)
        return report

    def converged(self) -> bool:
        return self._stall >= 2

    def _update_stall(self, report: SweepReport) -> None:
        prev = report.start_mean
        rel = (report.end_mean - prev) / max(abs(prev), 1e-12)
        self._stall = self._stall + 1 if rel < self.config.tol_rel else 0

    def train(self) -> tuple[PolicyStack, list[SweepReport]]:
        """Sweep until two consecutive sweeps improve by less than ``tol_rel`` or ``K`` sweeps ran."""
        self.incumbent()
        while self.sweeps_done < self.config.K and not self.converged():
            self._update_stall(self.sweep())
        return self.stack, self.reports

    # checkpointing ---------------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "sweeps_done": self.sweeps_done,
            "stall": self._stall,
            "history": self.history,
            "history_se": self.history_se,
            "c0_history": self.c0_history,
            "reports": [asdict(r) for r in self.reports],
            "audit": [list(a) for a in self.audit],
        }

    def load_state_dict(self, state: dict) -> None:
        self.sweeps_done = int(state["sweeps_done"])
        self._stall = int(state["stall"])
        self.history = [float(x) for x in state["history"]]
        self.history_se = [float("nan") if x is None else float(x) for x in state["history_se"]]
        self.c0_history = [float(x) for x in state["c0_history"]]
        self.reports = []
        for r in state["reports"]:
            periods = [PeriodRecord(**p) for p in r.pop("periods")]
            self.reports.append(SweepReport(periods=periods, **r))
        self.audit = [tuple(a) for a in state["audit"]]
        self._cache = None

    def save_checkpoint(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "stack.bin").write_bytes(self.stack.to_bytes())
        (d / "trainer.json").write_text(json.dumps(self.state_dict(), indent=2))

    def load_checkpoint(self, directory) -> None:
        d = Path(directory)
        self.stack.load_bytes((d / "stack.bin").read_bytes())
        self.load_state_dict(json.loads((d / "trainer.json").read_text()))


def sweep(problem: ProblemDefinition, stack: PolicyStack, config: TrainerConfig, k: int = 1,
          trainer: Trainer | None = None) -> tuple[PolicyStack, SweepReport]:
    """One time-separable sweep; pass ``trainer`` to keep its evaluation cache across calls."""
    trainer = trainer or Trainer(problem, stack, config, general=False)
    return trainer.stack, trainer.sweep(k)


def sweep_general(problem: ProblemDefinition, stack: PolicyStack, config: TrainerConfig, k: int = 1,
                  trainer: Trainer | None = None) -> tuple[PolicyStack, SweepReport]:
    """One sweep whose subproblems evaluate the whole-path utility on spliced paths."""
    trainer = trainer or Trainer(problem, stack, config, general=True)
    if not trainer.general:
        raise ContractError("trainer was built for time-separable sweeps")
    return trainer.stack, trainer.sweep(k)


def train(problem: ProblemDefinition, stack: PolicyStack, config: TrainerConfig,
          general: bool | None = None) -> tuple[PolicyStack, list[SweepReport]]:
    return Trainer(problem, stack, config, general=general).train()


def write_sweep_csv(reports: list[SweepReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_CSV_COLUMNS)
        for r in reports:
            for p in r.periods:
                w.writerow([r.sweep, p.period, int(p.accepted), repr(p.eval_mean), repr(p.eval_se),
                            f"{p.seconds:.3f}"])
