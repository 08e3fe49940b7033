"""Motion-supervised video object segmentation on synthetic sprite videos.

Training discovers objects from optical-flow supervision through a
piecewise-constant motion model with a learnable bounded residual
pathway, then refines the masks with dense-CRF and frozen-feature
appearance supervision. Channel hyperparameters are selected without
annotation via motion-semantic alignment.
"""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig
from .crf import CrfParams
from .sprites import SpriteSpec, VideoClip, generate_clip, make_dataset

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "CrfParams",
    "SpriteSpec",
    "VideoClip",
    "generate_clip",
    "make_dataset",
    "__version__",
]
