"""Out-of-distribution detection by multi-exit CAM feature masking, in plain numpy."""

from .model import ModelConfig, build, forward, train
from .scoring import calibrate_threshold, classify, mecam_score, score_images

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "build",
    "calibrate_threshold",
    "classify",
    "forward",
    "mecam_score",
    "score_images",
    "train",
]
