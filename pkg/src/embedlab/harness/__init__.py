"""Experiment configuration, execution, metrics, and the command line."""

from .config import ConfigError, ExperimentConfig, load_config, config_from_dict, config_to_dict
from .metrics import MetricsReport, compute_metrics, gaussian_frechet, paired_ttest
from .run import TrajectoryRecord, run_experiment
