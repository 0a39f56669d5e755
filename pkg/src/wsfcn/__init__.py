"""Single-stage weakly-supervised semantic segmentation on a numpy autodiff core.

The network trains from image-level labels only.  A flexible context
aggregation module (strip convolutions with channel and spatial attention)
sits on the deep features and an offset-aligned fusion module merges them
with shallow features before the mask head.
"""

from .core import ParamStore, ShapeError, Tape, Tensor, backward, no_grad
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .fca import FcaConfig, fca_forward
from .metrics import ConfusionMatrix, ensemble_infer, miou, pixacc
from .model import VARIANTS, ModelConfig, SegModel, build_model, model_forward
from .sf2 import Sf2Config, aligned_upsample, sf2_forward, sf2_fuse

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConfusionMatrix", "ExperimentConfig", "FcaConfig", "ModelConfig", "ParamStore",
    "SegModel", "Sf2Config", "ShapeError", "Tape", "Tensor", "VARIANTS", "aligned_upsample", "backward",
    "build_model", "ensemble_infer", "fca_forward", "load_config", "miou", "model_forward", "no_grad",
    "parse_config", "pixacc", "sf2_forward", "sf2_fuse",
]
