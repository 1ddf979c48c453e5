"""Few-shot distribution calibration with hierarchical optimal transport.

The library works on pre-extracted feature vectors.  Per-class base statistics
are transferred to novel support samples through adaptive weights: each weight
is the mass of an entropic transport plan, and the plan's cost is itself built
from per-class transport problems.
"""

__version__ = "0.1.0"

from .calibration import (
    calibrate,
    free_lunch_calibrate,
    high_level_plan,
    low_level_cost,
    sample_features,
    top_k_mask,
    variant_cost,
)
from .episodes import BaseContext, EpisodeSpec, HyperParams, evaluate, run_episode, sample_episode
from .features_io import FeatureTable, base_statistics, load_features, tukey_transform
from .linear_classifier import LRConfig, predict, train_lr
from .ot_core import exact_ot_small, sinkhorn

__all__ = [
    "BaseContext",
    "EpisodeSpec",
    "FeatureTable",
    "HyperParams",
    "LRConfig",
    "base_statistics",
    "calibrate",
    "evaluate",
    "exact_ot_small",
    "free_lunch_calibrate",
    "high_level_plan",
    "load_features",
    "low_level_cost",
    "predict",
    "run_episode",
    "sample_episode",
    "sample_features",
    "sinkhorn",
    "top_k_mask",
    "train_lr",
    "tukey_transform",
    "variant_cost",
]
