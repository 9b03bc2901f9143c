"""Coarse-to-fine feature alignment for cross-domain object detection, at desk scale.

A small two-stage detector written on a numpy autodiff engine, trained on a
labeled synthetic source domain and adapted to a foggy, hue-shifted target
domain with attention-weighted adversarial alignment (``art``) and
class-prototype alignment (``psa``).
"""

from .config import ConfigError, DataConfig, RunConfig, TrainConfig, parse_config
from .detector import DetectorConfig, DetectorModel, detect
from .domains import DatasetError, SceneConfig, ShiftConfig, make_domains, read_dataset, write_dataset
from .evaluation import error_analysis, evaluate, per_class_a_distance, proxy_a_distance
from .experiment import run_comparison
from .trainer import TrainingError, adapt, load_state, pretrain, resume, save_state

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataConfig",
    "DatasetError",
    "DetectorConfig",
    "DetectorModel",
    "RunConfig",
    "SceneConfig",
    "ShiftConfig",
    "TrainConfig",
    "TrainingError",
    "adapt",
    "detect",
    "error_analysis",
    "evaluate",
    "load_state",
    "make_domains",
    "parse_config",
    "per_class_a_distance",
    "pretrain",
    "proxy_a_distance",
    "read_dataset",
    "resume",
    "run_comparison",
    "save_state",
    "write_dataset",
]
