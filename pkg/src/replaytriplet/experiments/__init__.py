"""Config handling, sweep orchestration and the command-line interface."""

from .config import ExperimentConfig, apply_overrides, config_hash, packaged_config  # noqa: F401
from .runner import run_model_comparison, run_overlap_sweep, run_rl_evaluation  # noqa: F401
