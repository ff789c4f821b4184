"""Wire a RunConfig to problem, trainer, oracles and output files."""
from __future__ import annotations

import csv
import json
import logging
import subprocess
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ConfigurationError
from ..policy import PolicyStack, evaluate
from ..problems import (REGISTRY, dsice_path_diagnostics, dsice_reference_rollout, fbsde_oracle_y,
                        fbsde_oracle_policy_loss, growth_infinite_baseline, heston_affine_oracle,
                        heston_pde_oracle, lq_one_period_optimum)
from ..simulate import EVAL, HOLDOUT, SUFFIX, TRAIN, rollout, summarize
from ..trainer import Trainer, write_sweep_csv
from .config import RunConfig, apply_overrides, build_spec, parse_config, validate
from .plot import write_svg

log = logging.getLogger(__name__)

__all__ = ["execute_run", "resume_run", "compute_oracle", "version_stamp", "thread_limit",
           "PLOT_CSV_COLUMNS", "VOLATILE_SUMMARY_KEYS", "finite_json"]

PLOT_CSV_COLUMNS = ["sweep", "objective", "se", "c0_0"]
VOLATILE_SUMMARY_KEYS = ("timing",)


def version_stamp() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _build(cfg: RunConfig):
    diags = validate(cfg)
    if diags:
        raise ConfigurationError("\n".join(diags))
    spec = build_spec(cfg)
    problem = REGISTRY[cfg.problem_id][1](spec)
    return spec, problem


def _dsice_grid(cfg: RunConfig) -> tuple[list[float], list[float]]:
    mu = cfg.oracle.get("mu_grid", [0.1, 0.3, 0.5, 0.7, 0.9])
    p = cfg.oracle.get("p_grid", [0.1, 0.3, 0.5, 0.7, 0.9])
    return [float(x) for x in mu], [float(x) for x in p]


def compute_oracle(cfg: RunConfig, spec=None) -> dict:
    """Independent reference value for the configured problem (no training involved)."""
    spec = spec or build_spec(cfg)
    pid = cfg.problem_id
    opts = cfg.oracle
    if pid == "fbsde":
        n_mc = int(opts.get("N_mc", 10**7))
        y, se = fbsde_oracle_y(spec, n_mc, seed=int(opts.get("seed", cfg.seed)))
        var = fbsde_oracle_policy_loss(spec, y, int(opts.get("N_var", 10**6)))
        return {"kind": "monte-carlo y*", "y_star": y, "se": se, "N_mc": n_mc, "variance_scale": var}
    if pid == "heston":
        res = heston_pde_oracle(spec, ny=int(opts.get("ny", 400)), nt=int(opts.get("nt", 2000)),
                                y_max=float(opts.get("y_max", 1.0)))
        out = {"kind": "pde g(0, y0)", "g0": res.value, "grid_change": res.change,
               "grid_history": [list(h) for h in res.history], "p": spec.p}
        if abs(spec.p) < 1e-12:
            out["affine_g0"] = heston_affine_oracle(spec)
        return out
    if pid == "dsice":
        mus, ps = _dsice_grid(cfg)
        grid = [[dsice_reference_rollout(spec, m, p) for p in ps] for m in mus]
        arr = np.array(grid)
        i, j = np.unravel_index(np.argmax(arr), arr.shape)
        return {"kind": "best constant policy", "best": float(arr[i, j]), "best_mu": mus[i], "best_p": ps[j],
                "mu_grid": mus, "p_grid": ps, "grid": grid}
    if pid == "growth":
        base = growth_infinite_baseline(spec)
        return {"kind": "infinite-horizon closed form", "gamma": base.gamma.tolist(), "L": base.L.tolist(),
                "Z": base.Z, "consume_share": base.consume_share.tolist()}
    if pid == "lq":
        if spec.T == 1:
            return {"kind": "analytic one-period control", "c_star": lq_one_period_optimum(spec)}
        return {"kind": "none"}
    raise ConfigurationError(f"no oracle for problem {pid!r}")


def _c0_display(problem, stack) -> list[float]:
    return evaluate(stack, 0, problem.s0[None, :]).data[0].tolist()


def _write_plot_csv(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_CSV_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def _comparison(cfg: RunConfig, spec, problem, trainer: Trainer, oracle: dict | None) -> dict:
    """Problem-specific comparison of the trained stack against its reference."""
    est = trainer.incumbent()
    c0 = _c0_display(problem, trainer.stack)
    pid = cfg.problem_id
    out: dict = {}
    if pid == "growth":
        base = growth_infinite_baseline(spec)
        start = np.broadcast_to(problem.s0, (cfg.trainer_config().N_eval, problem.n_s)).copy()
        ro = rollout(problem, base.policy, 0, start, trainer.eval_stream)
        base_tot = np.sum(np.stack([r.data for r in ro.rewards], axis=1), axis=1)
        diff = summarize(trainer._cache.totals - base_tot)
        b = summarize(base_tot)
        out = {"baseline_objective": b.mean, "baseline_se": b.se, "paired_difference": diff.mean,
               "paired_se": diff.se, "paired_z": diff.mean / diff.se if diff.se > 0 else float("inf")}
    elif oracle is None:
        return out
    elif pid == "fbsde":
        y = c0[0]
        loss = -est.mean
        out = {"y": y, "y_star": oracle["y_star"], "rel_error": abs(y - oracle["y_star"]) / abs(oracle["y_star"]),
               "loss": loss, "variance_scale": oracle["variance_scale"],
               "loss_ratio": loss / oracle["variance_scale"]}
    elif pid == "heston":
        xi0 = c0[0]
        out = {"xi0": xi0, "g0": oracle["g0"], "rel_error": abs(xi0 - oracle["g0"]) / abs(oracle["g0"])}
    elif pid == "dsice":
        states, controls = trainer.eval_paths()
        out = {"baseline_objective": oracle["best"], "margin": est.mean - oracle["best"],
               **dsice_path_diagnostics(spec, np.stack(states, axis=1), controls)}
    elif pid == "lq" and "c_star" in oracle:
        out = {"c0": c0[0], "c_star": oracle["c_star"], "abs_error": abs(c0[0] - oracle["c_star"])}
    return out


def _write_outputs(out_dir: Path, cfg: RunConfig, spec, problem, trainer: Trainer, oracle, started: float,
                   final: bool) -> dict:
    write_sweep_csv(trainer.reports, out_dir / "sweeps.csv")
    sign = problem.sign
    rows = []
    c0_hist = trainer.c0_history
    for k, mean in enumerate(trainer.history):
        se = trainer.history_se[k] if k < len(trainer.history_se) else float("nan")
        rows.append((k, sign * mean, se, c0_hist[k] if k < len(c0_hist) else float("nan")))
    _write_plot_csv(out_dir / "plot.csv", rows)
    write_svg(out_dir / "plot.svg", [r[0] for r in rows], [r[1] for r in rows],
              title=f"{cfg.problem_id}: objective per sweep")
    trainer.save_checkpoint(out_dir / "checkpoint")
    est = trainer.incumbent()
    summary = {
        "problem": cfg.problem_id,
        "objective": sign * est.mean,
        "se": est.se,
        "objective_maximized": est.mean,
        "sweeps": trainer.sweeps_done,
        "converged": trainer.converged(),
        "complete": final,
        "c0": _c0_display(problem, trainer.stack),
        "history": [sign * h for h in trainer.history],
        "accepted_updates": sum(r.n_accepted for r in trainer.reports),
        "oracle": oracle,
        "baseline_objective": None,
        "comparison": {},
        "seeds": {"seed": cfg.seed, "streams": {"train": [TRAIN, "sweep"], "suffix": [SUFFIX, "sweep", "period",
                                                                                  "minibatch"],
                                                "eval": [EVAL], "holdout": [HOLDOUT]},
                  "init": cfg.seed},
        "version": version_stamp(),
        "stack_fingerprint": trainer.stack.fingerprint(),
        "config": cfg.as_dict(),
        "timing": {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "wall_seconds": time.time() - started},
    }
    if final:
        comp = _comparison(cfg, spec, problem, trainer, oracle)
        summary["comparison"] = comp
        if "baseline_objective" in comp:
            summary["baseline_objective"] = comp["baseline_objective"]
        if cfg.holdout:
            h = trainer.holdout(cfg.holdout)
            summary["holdout"] = {"objective": sign * h.mean, "se": h.se, "n": h.n}
    (out_dir / "summary.json").write_text(json.dumps(finite_json(summary), indent=2, sort_keys=False) + "\n")
    return summary


def finite_json(x):
    """JSON has no NaN/inf; map them to null."""
    if isinstance(x, dict):
        return {k: finite_json(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [finite_json(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _make_trainer(cfg: RunConfig, problem) -> Trainer:
    stack = PolicyStack.initialize(problem, np.random.default_rng(cfg.seed))
    return Trainer(problem, stack, cfg.trainer_config(), general=cfg.general)


def _train_loop(cfg, spec, problem, trainer, out_dir, oracle, started) -> dict:
    trainer.incumbent()
    _write_outputs(out_dir, cfg, spec, problem, trainer, oracle, started, final=False)
    while trainer.sweeps_done < trainer.config.K and not trainer.converged():
        report = trainer.sweep()
        trainer._update_stall(report)
        _write_outputs(out_dir, cfg, spec, problem, trainer, oracle, started, final=False)
    return _write_outputs(out_dir, cfg, spec, problem, trainer, oracle, started, final=True)


def execute_run(cfg: RunConfig) -> dict:
    started = time.time()
    spec, problem = _build(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2) + "\n")
    oracle = None
    if cfg.oracle.get("enabled", True):
        oracle = finite_json(compute_oracle(cfg, spec))
        (out_dir / "oracle.json").write_text(json.dumps({"inputs": cfg.as_dict(), "result": oracle}, indent=2) + "\n")
    with thread_limit(cfg.threads):
        trainer = _make_trainer(cfg, problem)
        return _train_loop(cfg, spec, problem, trainer, out_dir, oracle, started)


def resume_run(run_dir, overrides: list[str] | None = None, threads: int | None = None) -> dict:
    """Continue a run from its checkpoint (optionally with a larger ``K``)."""
    started = time.time()
    run_dir = Path(run_dir)
    try:
        raw = json.loads((run_dir / "config.json").read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"{run_dir} does not hold a resumable run: {exc}") from exc
    cfg = parse_config(json.dumps(raw), str(run_dir / "config.json"))
    cfg.output_dir = str(run_dir)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if threads is not None:
        cfg.threads = threads
    spec, problem = _build(cfg)
    oracle = None
    if (run_dir / "oracle.json").exists():
        oracle = json.loads((run_dir / "oracle.json").read_text())["result"]
    with thread_limit(cfg.threads):
        trainer = _make_trainer(cfg, problem)
        trainer.load_checkpoint(run_dir / "checkpoint")
        (run_dir / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2) + "\n")
        return _train_loop(cfg, spec, problem, trainer, run_dir, oracle, started)
