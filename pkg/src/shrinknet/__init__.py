"""Point-cloud classification with shrinking graph-convolution blocks."""

from .clustering import ClusterAssignment, cluster_points, kmeanspp_seed, lloyd
from .errors import (ConfigError, DataError, NumericError, OffParseError,
                     ShrinknetError)
from .network import (NetworkConfig, NetworkParams, build_network,
                      network_forward, stock_config)
from .train import (Checkpoint, Metrics, TrainConfig, evaluate,
                    load_checkpoint, metrics_from_confusion, save_checkpoint,
                    train)
from .unit import UnitParams, make_unit_params, unit_forward

__version__ = "0.1.0"

__all__ = [
    "ClusterAssignment", "cluster_points", "kmeanspp_seed", "lloyd",
    "ConfigError", "DataError", "NumericError", "OffParseError",
    "ShrinknetError",
    "NetworkConfig", "NetworkParams", "build_network", "network_forward",
    "stock_config",
    "Checkpoint", "Metrics", "TrainConfig", "evaluate", "load_checkpoint",
    "metrics_from_confusion", "save_checkpoint", "train",
    "UnitParams", "make_unit_params", "unit_forward",
    "__version__",
]
