"""Federated learning simulator with per-client forecasting twins that decide
when a client can skip sending its update."""

from .datasets import (ClientDataset, LabeledDataset, Partition, dirichlet_partition,
                       load_mnist, load_ucihar, make_synthetic)
from .errors import ConfigError, FedSkipError
from .estimators import FederatedClassifier
from .experiment import ExperimentConfig, compare, parse_config, run
from .fed import (Decision, RoundLog, SkipThresholds, Strategy, aggregate, client_update,
                  run_experiment, run_round, skip_decision)
from .nn import (Arch, Batch, LayerSpec, ParameterVector, TrainConfig, build_model, evaluate,
                 forward, l2_norm, loss_and_grad, sgd_step)
from .twin import TwinConfig, TwinForecast, TwinModel, make_twin, observe_and_retrain, predict

__version__ = "0.1.0"

__all__ = [
    "Arch", "Batch", "ClientDataset", "ConfigError", "Decision", "ExperimentConfig",
    "FedSkipError", "FederatedClassifier", "LabeledDataset", "LayerSpec", "ParameterVector",
    "Partition", "RoundLog", "SkipThresholds", "Strategy", "TrainConfig", "TwinConfig",
    "TwinForecast", "TwinModel", "aggregate", "build_model", "client_update", "compare",
    "dirichlet_partition", "evaluate", "forward", "l2_norm", "load_mnist", "load_ucihar",
    "loss_and_grad", "make_synthetic", "make_twin", "observe_and_retrain", "parse_config",
    "predict", "run", "run_experiment", "run_round", "sgd_step", "skip_decision",
]
