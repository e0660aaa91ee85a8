"""
madiff

Cross-domain makeup diffusion at desk scale: one conditional noise predictor
with learnable domain and tag embeddings drives beauty filtering, makeup
removal, text-guided edits and single/multi-reference makeup transfer.
"""

__version__ = "1.0.0"
__author__ = "madiff Contributors"

from .config import RunConfig, load_run_config
from .dataset import DatasetManifest, generate_sprites, load_manifest
from .denoiser import ConditionId, DenoiserModel, load_model, save_model, train
from .errors import MadiffError
from .scheduler import Schedule, make_schedule
from .trackers import ProgressTracker, TrainingTracker
from .translator import (
    TranslationOptions,
    beauty_filter,
    makeup_removal,
    makeup_transfer,
    multi_makeup_transfer,
    text_modify,
    translate,
)

__all__ = [
    "RunConfig",
    "load_run_config",
    "DatasetManifest",
    "generate_sprites",
    "load_manifest",
    "ConditionId",
    "DenoiserModel",
    "load_model",
    "save_model",
    "train",
    "MadiffError",
    "Schedule",
    "make_schedule",
    "ProgressTracker",
    "TrainingTracker",
    "TranslationOptions",
    "beauty_filter",
    "makeup_removal",
    "makeup_transfer",
    "multi_makeup_transfer",
    "text_modify",
    "translate",
]
