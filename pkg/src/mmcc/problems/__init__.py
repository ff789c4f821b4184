"""Built-in benchmark problems and their independent reference solutions."""
from .dsice import DsiceSpec, ProductivityChain, build_dsice, dsice_path_diagnostics, dsice_reference_rollout
from .fbsde import FbsdeSpec, build_fbsde, fbsde_oracle_y, fbsde_oracle_policy_loss
from .growth import DEFAULT_A, GrowthSpec, build_growth, growth_infinite_baseline
from .heston import (HestonSpec, build_heston_fbsde, heston_affine_oracle, heston_frozen_vol_value,
                     heston_pde_oracle, kraft_solvable_psi)
from .lq import LqSpec, build_lq, lq_one_period_optimum

REGISTRY = {
    "fbsde": (FbsdeSpec, build_fbsde),
    "heston": (HestonSpec, build_heston_fbsde),
    "growth": (GrowthSpec, build_growth),
    "dsice": (DsiceSpec, build_dsice),
    "lq": (LqSpec, build_lq),
}

__all__ = [
    "REGISTRY", "DEFAULT_A",
    "FbsdeSpec", "build_fbsde", "fbsde_oracle_y", "fbsde_oracle_policy_loss",
    "HestonSpec", "build_heston_fbsde", "heston_pde_oracle", "heston_affine_oracle",
    "heston_frozen_vol_value", "kraft_solvable_psi",
    "GrowthSpec", "build_growth", "growth_infinite_baseline",
    "DsiceSpec", "ProductivityChain", "build_dsice", "dsice_reference_rollout", "dsice_path_diagnostics",
    "LqSpec", "build_lq", "lq_one_period_optimum",
]
