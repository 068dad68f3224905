"""Meta-sample selection for noisy-label re-weighting by gradient-feature clustering."""
from ._accel import backend_name
from .data import Dataset
from .nn import NetworkParams, CheckpointStore
from .reweight import TrainConfig, run_meta_reweighting, warmup
from .selection import SelectionConfig, run_selection_pipeline

__version__ = "0.1.0"

__all__ = ["Dataset", "NetworkParams", "CheckpointStore", "TrainConfig", "SelectionConfig",
           "run_meta_reweighting", "run_selection_pipeline", "warmup", "backend_name"]
