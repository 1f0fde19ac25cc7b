from .config import ExperimentConfig, PROFILES, config_from_dict, load_config, save_config
from .runner import RunManifest, compare_runs, evaluate_checkpoint, run
