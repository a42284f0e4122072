"""Dataset ingestion, synthetic scenes and the end-to-end localisation loop."""

from .config import PipelineConfig, load_config, save_config
from .dataset import DataError, Dataset, load_dataset, save_dataset
from .runner import InitializationError, RunResult, detect_loop, initialize, run, write_outputs
from .simulate import SceneSpec, simulate

__all__ = [
    "DataError",
    "Dataset",
    "InitializationError",
    "PipelineConfig",
    "RunResult",
    "SceneSpec",
    "detect_loop",
    "initialize",
    "load_config",
    "load_dataset",
    "run",
    "save_config",
    "save_dataset",
    "simulate",
    "write_outputs",
]
