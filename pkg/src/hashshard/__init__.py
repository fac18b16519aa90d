"""Model-parallel sparse training with LSH-selected active neurons."""
from .kernels import BACKEND
from .sparse import InputError, PackedRows, SparseVector
from .lsh import FillPolicy, HashFamily, LshConfig, LshIndex, build_index, select_active
from .layer import Activation, LayerSpec, NeuronShard, NonFiniteError, OptimizerConfig
from .engine import (ConfigError, Mode, NetworkSpec, Parallelism, Trainer, TrainingConfig,
                     evaluate, partition_layer, train)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "InputError", "PackedRows", "SparseVector", "FillPolicy", "HashFamily",
    "LshConfig", "LshIndex", "build_index", "select_active", "Activation", "LayerSpec",
    "NeuronShard", "NonFiniteError", "OptimizerConfig", "ConfigError", "Mode", "NetworkSpec",
    "Parallelism", "Trainer", "TrainingConfig", "evaluate", "partition_layer", "train",
]
