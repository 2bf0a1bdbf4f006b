"""Dual positive/negative image-prompt guidance for synthetic few-shot data."""

from .backends import (
    AnalyticBackend,
    GaussianCondition,
    NoiseSchedule,
    analytic_eps,
    ddim_step,
    sample,
    tilted_moments,
)
from .guidance import (
    ConditionSet,
    GuidanceWeights,
    NoisePredictionQuad,
    combine_dual_cfg,
    combine_single_image_cfg,
    combine_text_cfg,
    required_passes,
)
from .similarity import class_similarity_matrix, negative_distribution, sample_negative_class

__version__ = "0.1.0"
