"""Synthetic clips, the linear toy codec, curation and augmentation."""

from luve.data.augment import gaussian_blur, gaussian_kernel, unsharp_mask
from luve.data.codec import ToyCodec, export_video, toy_decode, toy_encode
from luve.data.curation import (
    DEFAULT_THRESHOLD,
    contrast_sharpness_score,
    curate,
    retained_indices,
    score_clips,
)
from luve.data.pairs import TRAINING_SCALES, LatentPair, downscale, lr_extent, make_lr_hr_pairs
from luve.data.scenes import (
    MOTION_CLASSES,
    ShapeObject,
    ShapeSceneConfig,
    gen_moving_shapes,
    reflect,
    trajectory,
)

__all__ = [name for name in dir() if not name.startswith("_")]
