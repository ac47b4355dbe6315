from . import config, log
from .core import ALL_LAYERS, LayerId, Network, Tensor, backward, no_grad
from .domains import CLASSES, DOMAINS, Dataset, Split, generate_dataset, leave_one_out
from .errors import (
    ConfigError,
    ContractError,
    GradientCheckError,
    NumericalError,
    PlacedropError,
    ShapeError,
)
from .experiment import ExperimentConfig, load_config, run_experiment
from .place import PlaceConfig, PlaceDropout, schedule_ratio
from .style import StyleConfig, adain, channel_stats, mix_style, swap_style
from .trainer import TrainConfig, train


__author__ = "placedrop-team"
__version__ = "0.1.0"  # DO NOT MODIFY

__all__ = [
    "adain",
    "ALL_LAYERS",
    "backward",
    "channel_stats",
    "CLASSES",
    "config",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DOMAINS",
    "ExperimentConfig",
    "generate_dataset",
    "GradientCheckError",
    "LayerId",
    "leave_one_out",
    "load_config",
    "log",
    "mix_style",
    "Network",
    "no_grad",
    "NumericalError",
    "PlaceConfig",
    "PlacedropError",
    "PlaceDropout",
    "run_experiment",
    "schedule_ratio",
    "ShapeError",
    "Split",
    "StyleConfig",
    "swap_style",
    "Tensor",
    "train",
    "TrainConfig",
]
