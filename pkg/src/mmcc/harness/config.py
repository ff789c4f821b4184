"""Run configuration: YAML files, ``--set`` overrides, and validation diagnostics."""
from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from ..errors import ConfigurationError
from ..problems import REGISTRY
from ..problems.dsice import ProductivityChain
from ..trainer import TrainerConfig

__all__ = ["RunConfig", "load_config", "parse_config", "apply_overrides", "shipped_config",
           "shipped_configs", "build_spec", "validate", "TOP_LEVEL_KEYS"]

TOP_LEVEL_KEYS = ("problem", "trainer", "seed", "oracle", "output_dir", "threads", "holdout", "general")
TRAINER_KEYS = tuple(f.name for f in dataclasses.fields(TrainerConfig) if f.name != "seed")


@dataclass
class RunConfig:
    problem_id: str
    problem: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    seed: int = 0
    oracle: dict = field(default_factory=lambda: {"enabled": True})
    output_dir: str = "runs/out"
    threads: int | None = None
    holdout: int = 0
    general: bool | None = None
    lines: dict = field(default_factory=dict, repr=False)
    source: str | None = None

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(seed=self.seed, **self.trainer)

    def as_dict(self) -> dict:
        return {
            "problem": {"id": self.problem_id, **_jsonable(self.problem)},
            "trainer": _jsonable(self.trainer),
            "seed": self.seed,
            "oracle": _jsonable(self.oracle),
            "output_dir": self.output_dir,
            "threads": self.threads,
            "holdout": self.holdout,
            "general": self.general,
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _line_map(text: str) -> dict[str, int]:
    """Dotted key -> 1-based line number, from the YAML node tree."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[key] = k.start_mark.line + 1
                walk(v, key)

    walk(root, "")
    return out


def _where(cfg: RunConfig, key: str) -> str:
    line = cfg.lines.get(key)
    src = cfg.source or "<config>"
    return f"{src}:{line}: " if line else f"{src}: "


def parse_config(text: str, source: str | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source or '<config>'}:{mark.line + 1}" if mark else (source or "<config>")
        raise ConfigurationError(f"{where}: YAML parse error: {getattr(exc, 'problem', exc)}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{source or '<config>'}: top level must be a mapping")
    lines = _line_map(text)
    unknown = [k for k in raw if k not in TOP_LEVEL_KEYS]
    if unknown:
        k = unknown[0]
        raise ConfigurationError(f"{source or '<config>'}:{lines.get(k, '?')}: unknown top-level key {k!r}")
    problem = dict(raw.get("problem") or {})
    pid = problem.pop("id", None)
    if pid is None:
        raise ConfigurationError(f"{source or '<config>'}: problem.id is required")
    oracle = raw.get("oracle", True)
    if isinstance(oracle, bool):
        oracle = {"enabled": oracle}
    else:
        oracle = {"enabled": True, **dict(oracle)}
    cfg = RunConfig(
        problem_id=str(pid), problem=problem, trainer=dict(raw.get("trainer") or {}),
        seed=int(raw.get("seed", 0)), oracle=oracle, output_dir=str(raw.get("output_dir", "runs/out")),
        threads=raw.get("threads"), holdout=int(raw.get("holdout", 0) or 0), general=raw.get("general"),
        lines=lines, source=source,
    )
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def shipped_configs() -> list[str]:
    root = resources.files("mmcc") / "configs"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".yaml"))


def shipped_config(name: str) -> RunConfig:
    """A config bundled with the package, e.g. ``growth_desk``."""
    f = resources.files("mmcc") / "configs" / f"{name}.yaml"
    if not f.is_file():
        raise ConfigurationError(f"no shipped config named {name!r} (have: {', '.join(shipped_configs())})")
    return parse_config(f.read_text(), f"configs/{name}.yaml")


def _spec_fields(pid: str) -> set[str]:
    return {f.name for f in dataclasses.fields(REGISTRY[pid][0])}


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``key=value`` strings.  Keys are dotted paths (``trainer.N``,
    ``problem.d``, ``oracle.N_mc``) or bare names looked up in the problem
    spec, then the trainer, then the top level.  A bare name that is both a
    spec field and a trainer field is rejected."""
    cfg = copy.deepcopy(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, text = pair.split("=", 1)
        key = key.strip()
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"--set {key}: cannot parse value {text!r}") from exc
        parts = key.split(".")
        if len(parts) == 1:
            in_spec = cfg.problem_id in REGISTRY and key in _spec_fields(cfg.problem_id)
            if in_spec and key in TRAINER_KEYS:
                raise ConfigurationError(f"--set {key}: ambiguous for problem {cfg.problem_id!r}; "
                                         f"use problem.{key} or trainer.{key}")
            if in_spec:
                parts = ["problem", key]
            elif key in TRAINER_KEYS:
                parts = ["trainer", key]
            elif key in TOP_LEVEL_KEYS:
                parts = [key]
            else:
                raise ConfigurationError(f"--set {key}: unknown key")
        head, rest = parts[0], parts[1:]
        if head == "problem" and rest == ["id"]:
            cfg.problem_id = str(value)
        elif head in ("problem", "trainer", "oracle") and len(rest) == 1:
            getattr(cfg, head)[rest[0]] = value
        elif head == "oracle" and not rest:
            cfg.oracle["enabled"] = bool(value)
        elif not rest and head in ("seed", "holdout", "threads"):
            setattr(cfg, head, None if value is None else int(value))
        elif not rest and head in ("output_dir", "general"):
            setattr(cfg, head, value)
        else:
            raise ConfigurationError(f"--set {key}: unknown key")
    return cfg


def _coerce(spec_cls, name: str, value):
    if name == "A":
        return np.asarray(value, dtype=float)
    if name == "b" and value is not None:
        return np.asarray(value, dtype=float)
    if name == "productivity":
        if value is None or value is False:
            return None
        if value is True:
            return ProductivityChain()
        return ProductivityChain(**{k: (tuple(map(tuple, v)) if k == "transition" else tuple(v) if k == "values" else v)
                                    for k, v in dict(value).items()})
    if isinstance(value, list):
        return tuple(value)
    return value


def build_spec(cfg: RunConfig):
    if cfg.problem_id not in REGISTRY:
        raise ConfigurationError(f"{_where(cfg, 'problem.id')}unknown problem id {cfg.problem_id!r} "
                                 f"(known: {', '.join(sorted(REGISTRY))})")
    spec_cls = REGISTRY[cfg.problem_id][0]
    names = _spec_fields(cfg.problem_id)
    kwargs = {}
    for k, v in cfg.problem.items():
        if k not in names:
            raise ConfigurationError(f"{_where(cfg, 'problem.' + k)}unknown field {k!r} for problem "
                                     f"{cfg.problem_id!r}")
        kwargs[k] = _coerce(spec_cls, k, v)
    try:
        return spec_cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{_where(cfg, 'problem')}invalid problem spec: {exc}") from exc


def validate(cfg: RunConfig) -> list[str]:
    """All problems with ``cfg`` as human-readable diagnostics; empty means valid."""
    diags: list[str] = []
    unknown = [k for k in cfg.trainer if k not in TRAINER_KEYS]
    for k in unknown:
        diags.append(f"{_where(cfg, 'trainer.' + k)}unknown trainer field {k!r}")
    if not unknown:
        try:
            tc = cfg.trainer_config()
            diags += [f"{_where(cfg, 'trainer')}{d}" for d in tc.diagnostics()]
        except (TypeError, ValueError) as exc:
            diags.append(f"{_where(cfg, 'trainer')}{exc}")
    try:
        spec = build_spec(cfg)
    except ConfigurationError as exc:
        diags.append(str(exc))
        return diags
    if hasattr(spec, "diagnostics"):
        diags += [f"{_where(cfg, 'problem')}{d}" for d in spec.diagnostics()]
    hidden = getattr(spec, "hidden", None)
    if hidden is not None and (len(hidden) == 0 or any(int(h) < 1 for h in hidden)):
        diags.append(f"{_where(cfg, 'problem.hidden')}hidden widths must be a non-empty list of positive integers")
    if cfg.threads is not None and int(cfg.threads) < 1:
        diags.append(f"{_where(cfg, 'threads')}threads must be >= 1")
    if cfg.holdout < 0 or cfg.holdout == 1:
        diags.append(f"{_where(cfg, 'holdout')}holdout must be 0 or >= 2")
    out = Path(cfg.output_dir)
    probe = out if out.exists() else next((p for p in out.parents if p.exists()), Path("."))
    if not os.access(probe, os.W_OK):
        diags.append(f"{_where(cfg, 'output_dir')}output directory {out} is not writable")
    return diags
