from qlens.harness.config import ExperimentConfig, config_from_dict, load_config, preset_config
from qlens.harness.runner import CSV_FIELDS, RunResult, TrialResult, run

__all__ = [
    "ExperimentConfig",
    "config_from_dict",
    "load_config",
    "preset_config",
    "CSV_FIELDS",
    "RunResult",
    "TrialResult",
    "run",
]
