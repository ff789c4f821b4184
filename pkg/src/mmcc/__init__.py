"""Monotone Monte Carlo control: per-period neural policies trained by backward sweeps."""
from importlib.metadata import PackageNotFoundError, version as _version

from .autodiff import Graph, Network, Tensor
from .optim import AdamState, adam_step, run_minibatch_ascent
from .policy import PolicyStack, evaluate
from .simulate import ProblemDefinition, estimate_objective, simulate_full, simulate_suffix
from .trainer import Trainer, TrainerConfig, sweep, sweep_general, train

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__ = [
    "Tensor", "Graph", "Network", "AdamState", "adam_step", "run_minibatch_ascent",
    "PolicyStack", "evaluate", "ProblemDefinition", "simulate_full", "simulate_suffix",
    "estimate_objective", "Trainer", "TrainerConfig", "sweep", "sweep_general", "train",
]
