from __future__ import annotations

import csv

import numpy as np
import pytest

from mmcc.autodiff import Tensor
from mmcc.errors import ContractError
from mmcc.policy import PolicyStack
from mmcc.problems import FbsdeSpec, LqSpec, build_fbsde, build_lq, lq_one_period_optimum
from mmcc.simulate import ProblemDefinition
from mmcc.trainer import (SWEEP_CSV_COLUMNS, Trainer, TrainerConfig, sweep, sweep_general, train,
                          write_sweep_csv)


def _lq(T=3, **kw):
    problem = build_lq(LqSpec(T=T, sigma=0.3, hidden=(8,), **kw))
    return problem, PolicyStack.initialize(problem, 0)


def test_config_diagnostics():
    assert TrainerConfig(N=100, b=10, m=10).diagnostics() == []
    diags = TrainerConfig(N=100, b=10, m=9, N_eval=1, K=0).diagnostics()
    assert any("b*m != N" in d for d in diags)
    assert any("N_eval" in d for d in diags) and any("K" in d for d in diags)
    with pytest.raises(ContractError):
        TrainerConfig(N=100, b=10, m=9).validate()


def test_learning_rate_schedule():
    cfg = TrainerConfig(lr=0.1, lr_decay=0.5, lr_min=0.02)
    assert [cfg.learning_rate(k) for k in (1, 2, 3, 4)] == [0.1, 0.05, 0.025, 0.02]
    assert TrainerConfig(lr=0.01).learning_rate(50) == 0.01


def test_one_period_lq_recovers_analytic_control():
    spec = LqSpec(T=1)
    problem = build_lq(spec)
    stack = PolicyStack.initialize(problem, 0)
    cfg = TrainerConfig(N=256, b=8, m=32, lr=0.05, lr_decay=0.7, K=12, tol_rel=0, N_eval=16)
    train(problem, stack, cfg)
    assert abs(stack.c0.data[0] - lq_one_period_optimum(spec)) < 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objective_sequence_never_decreases(seed):
    problem, stack = _lq(T=4)
    tr = Trainer(problem, stack, TrainerConfig(N=64, b=8, m=8, lr=0.05, K=4, tol_rel=0, N_eval=32, seed=seed))
    tr.train()
    assert all(b >= a for a, b in zip(tr.history, tr.history[1:]))
    for r in tr.reports:
        means = [r.start_mean] + [p.eval_mean for p in r.periods]
        assert all(b >= a for a, b in zip(means, means[1:]))
    assert tr.history[-1] > tr.history[0]


def test_k_equals_one_runs_one_sweep():
    problem, stack = _lq()
    _, reports = train(problem, stack, TrainerConfig(N=32, b=8, m=4, K=1, N_eval=8))
    assert len(reports) == 1 and reports[0].sweep == 1


def test_audit_order_is_backward():
    problem, stack = _lq(T=4)
    tr = Trainer(problem, stack, TrainerConfig(N=32, b=8, m=4, K=2, tol_rel=0, N_eval=8))
    tr.train()
    for k in (1, 2):
        entries = [e for e in tr.audit if e[0] == k]
        assert [e[1] for e in entries if e[2] == "begin"] == [3, 2, 1, 0]
        for i in range(0, len(entries), 2):
            assert entries[i][2] == "begin" and entries[i + 1][2] in ("write", "restore")
            assert entries[i][1] == entries[i + 1][1]


def test_rejection_keeps_stack_identical():
    problem, stack = _lq()
    before = stack.to_bytes()
    tr = Trainer(problem, stack, TrainerConfig(N=32, b=8, m=4, K=1, N_eval=8))
    start = tr.incumbent().mean
    tr._cache.estimate.mean = np.inf   # nothing can beat this
    report = tr.sweep()
    assert report.n_accepted == 0
    assert stack.to_bytes() == before
    assert report.end_mean == np.inf and start < np.inf


def _constant_problem():
    return ProblemDefinition(
        name="flat", n_s=1, n_c=1, n_z=1, T=3, s0=np.zeros(1),
        transition=lambda t, s, c, z: s + c * 0.0 + Tensor(z),
        reward=lambda t, sn, s, c: Tensor(np.ones(s.data.shape[0])) + c.sum(axis=1) * 0.0,
    )


@pytest.mark.parametrize("runner", [sweep, sweep_general])
def test_ties_are_rejected(runner):
    problem = _constant_problem()
    stack = PolicyStack.initialize(problem, 0, hidden=[4])
    stack.c0.data = np.array([0.5])
    before = stack.to_bytes()
    cfg = TrainerConfig(N=16, b=4, m=4, lr=0.1, N_eval=8)
    new, report = runner(problem, stack, cfg)
    assert new is stack
    assert not any(report.accepted.values())
    assert stack.to_bytes() == before


def test_general_sweep_matches_separable_decisions():
    problem = build_lq(LqSpec(T=3, sigma=0.2, hidden=(6,)))
    cfg = TrainerConfig(N=64, b=8, m=8, lr=0.05, N_eval=32, seed=4)
    a = PolicyStack.initialize(problem, 1)
    b = PolicyStack.initialize(problem, 1)
    ta, tb = Trainer(problem, a, cfg, general=False), Trainer(problem, b, cfg, general=True)
    for k in (1, 2):
        ra, rb = ta.sweep(k), tb.sweep(k)
        assert ra.accepted == rb.accepted
        np.testing.assert_allclose([p.eval_mean for p in ra.periods], [p.eval_mean for p in rb.periods],
                                   rtol=1e-9)
    np.testing.assert_allclose(a.networks[0].net.get_vector(), b.networks[0].net.get_vector(), rtol=1e-7,
                               atol=1e-10)


def test_fbsde_trains_in_general_mode():
    problem = build_fbsde(FbsdeSpec(d=2, N_T=4, hidden=(6,)))
    stack = PolicyStack.initialize(problem, 0)
    assert not problem.separable
    with pytest.raises(ContractError):
        Trainer(problem, stack, TrainerConfig(N=16, b=4, m=4), general=False)
    _, report = sweep_general(problem, stack, TrainerConfig(N=64, b=8, m=8, lr=0.05, N_eval=64))
    assert report.end_mean >= report.start_mean
    assert report.n_accepted >= 1


def test_sweep_general_refuses_separable_trainer():
    problem, stack = _lq()
    tr = Trainer(problem, stack, TrainerConfig(N=16, b=4, m=4), general=False)
    with pytest.raises(ContractError):
        sweep_general(problem, stack, tr.config, trainer=tr)


def test_stops_after_two_stalled_sweeps():
    problem = _constant_problem()
    stack = PolicyStack.initialize(problem, 0, hidden=[4])
    _, reports = train(problem, stack, TrainerConfig(N=16, b=4, m=4, K=10, tol_rel=1e-3, N_eval=8))
    assert len(reports) == 2


def test_failed_update_is_rejected_and_sweep_continues():
    def reward(t, sn, s, c):
        # the gradient pushes c upward, into a region where the reward is nan
        return c.sum(axis=1) + Tensor(np.where(c.data[:, 0] > 0.05, np.nan, 0.0))
    problem = ProblemDefinition(name="fragile", n_s=1, n_c=1, n_z=0, T=2, s0=np.ones(1),
                                transition=lambda t, s, c, z: s + c, reward=reward)
    stack = PolicyStack.initialize(problem, 0, hidden=[3])
    for p in stack.networks[0].net.parameters():
        p.data[:] = 0.0
    stack.c0.data = np.array([0.01])
    before = stack.to_bytes()
    tr = Trainer(problem, stack, TrainerConfig(N=16, b=4, m=4, lr=0.5, N_eval=4))
    report = tr.sweep()
    assert [p.period for p in report.periods] == [1, 0]
    assert all(p.error is not None and not p.accepted for p in report.periods)
    assert stack.to_bytes() == before
    assert [e[2] for e in tr.audit] == ["begin", "restore", "begin", "restore"]


def test_prefix_cache_matches_opening_simulation(monkeypatch):
    from mmcc import trainer as trainer_mod
    problem, stack = _lq(T=3)
    cfg = TrainerConfig(N=32, b=8, m=4, N_eval=8, seed=5)
    seen = {}
    real = trainer_mod.simulate_full

    def spy(*args, **kwargs):
        batch = real(*args, **kwargs)
        seen["states"] = batch.states.copy()
        return batch
    monkeypatch.setattr(trainer_mod, "simulate_full", spy)
    ref = real(problem, stack, cfg.N, cfg.seed, key=(trainer_mod.TRAIN, 1))
    Trainer(problem, stack, cfg).sweep(1)
    assert seen["states"].tobytes() == ref.states.tobytes()


def test_checkpoint_round_trip(tmp_path):
    problem, stack = _lq()
    cfg = TrainerConfig(N=32, b=8, m=4, K=3, tol_rel=0, N_eval=8)
    tr = Trainer(problem, stack, cfg)
    tr.sweep()
    tr.save_checkpoint(tmp_path)
    other = Trainer(problem, PolicyStack.initialize(problem, 9), cfg)
    other.load_checkpoint(tmp_path)
    assert other.stack.to_bytes() == stack.to_bytes()
    assert other.history == tr.history and other.sweeps_done == 1
    assert other.incumbent().mean == tr.incumbent().mean
    tr.sweep()
    other.sweep()
    assert other.stack.to_bytes() == stack.to_bytes()


def test_sweep_csv(tmp_path):
    problem, stack = _lq()
    _, reports = train(problem, stack, TrainerConfig(N=32, b=8, m=4, K=2, tol_rel=0, N_eval=8))
    out = tmp_path / "sweeps.csv"
    write_sweep_csv(reports, out)
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == SWEEP_CSV_COLUMNS
    assert len(rows) == 2 * problem.T
    assert [int(r["period"]) for r in rows[:3]] == [2, 1, 0]


def test_stack_problem_mismatch():
    problem, _ = _lq(T=3)
    other = PolicyStack.initialize(build_lq(LqSpec(T=4)), 0)
    with pytest.raises(ContractError):
        Trainer(problem, other, TrainerConfig(N=16, b=4, m=4))
