"""``mmcc`` command line: run, oracle, validate, resume, configs.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..errors import ConfigurationError, ContractError, ConvergenceError, NumericalFailure
from .config import apply_overrides, load_config, shipped_config, shipped_configs, validate
from .runner import compute_oracle, execute_run, finite_json, resume_run, thread_limit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _selection_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML run configuration")
    p.add_argument("--problem", "-p", help="problem id; without --config loads the shipped <id>_desk config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (dotted path or bare field name); repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o", help="output directory")
    p.add_argument("--threads", type=int, help="cap BLAS threads (default: $MMCC_THREADS)")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmcc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)
    _selection_args(sub.add_parser("run", help="train and write sweep CSV, summary JSON and plot data"))
    _selection_args(sub.add_parser("oracle", help="compute the problem's independent reference value"))
    _selection_args(sub.add_parser("validate", help="print configuration diagnostics"))
    r = sub.add_parser("resume", help="continue a run from its checkpoint")
    r.add_argument("run_dir")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--threads", type=int)
    sub.add_parser("configs", help="list shipped configs")
    return ap


def _resolve(args):
    if args.config:
        cfg = load_config(args.config)
    elif args.problem:
        cfg = shipped_config(f"{args.problem}_desk")
    else:
        raise ConfigurationError("give --config or --problem")
    if args.problem and args.config and args.problem != cfg.problem_id:
        cfg = apply_overrides(cfg, [f"problem.id={args.problem}"])
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output:
        cfg.output_dir = args.output
    if args.threads is not None:
        cfg.threads = args.threads
    elif cfg.threads is None and os.environ.get("MMCC_THREADS"):
        cfg.threads = int(os.environ["MMCC_THREADS"])
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.verb == "configs":
            print("\n".join(shipped_configs()))
            return EXIT_OK
        if args.verb == "resume":
            threads = args.threads if args.threads is not None else os.environ.get("MMCC_THREADS")
            summary = resume_run(args.run_dir, args.overrides, None if threads is None else int(threads))
            print(json.dumps({k: summary[k] for k in ("objective", "se", "sweeps", "baseline_objective")}))
            return EXIT_OK
        cfg = _resolve(args)
        if args.verb == "validate":
            diags = validate(cfg)
            for d in diags:
                print(d)
            if not diags:
                print("ok")
            return EXIT_OK if not diags else EXIT_CONFIG
        if args.verb == "oracle":
            diags = validate(cfg)
            if diags:
                raise ConfigurationError("\n".join(diags))
            with thread_limit(cfg.threads):
                result = compute_oracle(cfg)
            os.makedirs(cfg.output_dir, exist_ok=True)
            payload = {"inputs": cfg.as_dict(), "result": finite_json(result)}
            with open(os.path.join(cfg.output_dir, "oracle.json"), "w") as fh:
                json.dump(payload, fh, indent=2)
                fh.write("\n")
            print(json.dumps(finite_json(result)))
            return EXIT_OK
        summary = execute_run(cfg)
        print(json.dumps({k: summary[k] for k in ("objective", "se", "sweeps", "baseline_objective")}))
        return EXIT_OK
    except (ConfigurationError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
