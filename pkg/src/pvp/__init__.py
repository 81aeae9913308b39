"""Two-stage parameter-efficient tuning for a miniature vision transformer.

Stage 1 pre-trains small tuning modules (prompt tokens, adapters, or
low-rank query/value deltas) on a source task against a frozen backbone;
stage 2 loads them as the initialization for downstream few-shot tuning.
The scikit-learn style estimators in :mod:`pvp.estimators` are the
friendliest entry point; the layer below exposes the full workflow.
"""

from .autodiff import AdamW, Tensor, backward
from .data import DataSpec, Dataset, FewShotEpisode, generate, sample_episode
from .errors import (ConfigError, DataError, FormatError, IntegrityError,
                     NumericalError, PVPError, ShapeError)
from .pet import Method, PetConfig, PetParams, attach, count_trainable
from .training import RunRecord, TrainSpec, evaluate, grid_search, train
from .vit import ViTConfig, ViTParams, backbone_digest, forward, init_backbone
from .workflow import (LoadSpec, LoadType, ModuleCheckpoint, downstream_tune,
                       load_checkpoint, load_modules, load_prompts,
                       pretrain_modules, save_checkpoint, snapshot_modules)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Tensor", "backward",
    "DataSpec", "Dataset", "FewShotEpisode", "generate", "sample_episode",
    "ConfigError", "DataError", "FormatError", "IntegrityError",
    "NumericalError", "PVPError", "ShapeError",
    "Method", "PetConfig", "PetParams", "attach", "count_trainable",
    "RunRecord", "TrainSpec", "evaluate", "grid_search", "train",
    "ViTConfig", "ViTParams", "backbone_digest", "forward", "init_backbone",
    "LoadSpec", "LoadType", "ModuleCheckpoint", "downstream_tune",
    "load_checkpoint", "load_modules", "load_prompts", "pretrain_modules",
    "save_checkpoint", "snapshot_modules",
    "__version__",
]
