"""fewseg: episodic few-shot semantic segmentation.

Multi-level prototype generation and interaction (one global support vector,
an m x m grid of local query vectors), transformer feature activation with
cycle-consistent cross-attention, and a training-only unlabeled branch
supervised by weak/strong pseudo-label consistency.
"""

from .config import RunConfig, synthetic_desk_config
from .data import (
    Episode,
    FoldSpec,
    SamplePair,
    SegmentationDataset,
    make_folds,
    sample_episode,
    synthetic_dataset,
)
from .losses import LossReport, dice_loss, final_loss, main_loss
from .metrics import MetricAccumulator
from .model import FewShotSegmenter, build_model
from .prototypes import (
    LocalPrototypeGrid,
    PriorMask,
    cosine_prior,
    masked_average_pool,
    pool_local_grid,
)

__version__ = "0.1.0"

__all__ = [
    "Episode",
    "FewShotSegmenter",
    "FoldSpec",
    "LocalPrototypeGrid",
    "LossReport",
    "MetricAccumulator",
    "PriorMask",
    "RunConfig",
    "SamplePair",
    "SegmentationDataset",
    "build_model",
    "cosine_prior",
    "dice_loss",
    "final_loss",
    "main_loss",
    "make_folds",
    "masked_average_pool",
    "pool_local_grid",
    "sample_episode",
    "synthetic_dataset",
    "synthetic_desk_config",
]
