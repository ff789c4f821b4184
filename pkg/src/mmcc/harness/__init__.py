"""Command-line harness: configs, runs, oracles and output artifacts."""
from .config import RunConfig, apply_overrides, load_config, parse_config, shipped_config, validate
from .runner import compute_oracle, execute_run, resume_run

__all__ = ["RunConfig", "load_config", "parse_config", "apply_overrides", "shipped_config", "validate",
           "execute_run", "resume_run", "compute_oracle"]
