"""Unified adapters for frozen vision-language models, on a from-scratch numpy autodiff."""
from .adaptation import (AdaptationConfig, ConfigError, ParameterStore, build_model, build_parameter_plan,
                         count_tunable, format_count)
from .backbone import BackboneConfig, HybridModel
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import WorldSpec, generate
from .frames import VideoFeatures, pfa_apply, pfa_weights
from .objectives import retrieval_metrics
from .train import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "BackboneConfig", "ConfigError", "HybridModel", "ParameterStore", "RunConfig",
    "VideoFeatures", "WorldSpec", "build_model", "build_parameter_plan", "count_tunable", "evaluate",
    "format_count", "generate", "load_checkpoint", "load_config", "parse_config", "pfa_apply",
    "pfa_weights", "retrieval_metrics", "save_checkpoint", "train",
]
