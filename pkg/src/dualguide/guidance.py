"""Classifier-free guidance combinators for text, one image and two images.

All combinators take a :class:`NoisePredictionQuad` holding the denoiser
outputs of the branches evaluated at one step and return the guided noise
prediction. They are pure functions of their inputs.
"""

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "GuidanceWeights",
    "ConditionSet",
    "NoisePredictionQuad",
    "combine_text_cfg",
    "combine_single_image_cfg",
    "combine_dual_cfg",
    "combine",
    "required_passes",
]


@dataclass(frozen=True)
class GuidanceWeights:
    """Guidance scales. ``w_im_neg`` is a magnitude; the combinator subtracts it."""

    w_text: float = 7.5
    w_im_pos: float = 0.0
    w_im_neg: float = 0.0

    def __post_init__(self):
        for name in ("w_text", "w_im_pos", "w_im_neg"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise InvalidInputError(f"{name} must be finite, got {value}")
            if value < 0:
                raise InvalidInputError(f"{name} must be >= 0, got {value}")
            object.__setattr__(self, name, value)

    def as_tuple(self):
        return (self.w_text, self.w_im_pos, self.w_im_neg)

    def to_dict(self):
        return {"w_text": self.w_text, "w_im_pos": self.w_im_pos, "w_im_neg": self.w_im_neg}


@dataclass(frozen=True)
class ConditionSet:
    """Conditioning handles for one generation.

    The handles are opaque to this module; backends interpret them. A negative
    image prompt is only meaningful on top of a positive one.
    """

    text: Any
    image_pos: Optional[Any] = None
    image_neg: Optional[Any] = None

    def __post_init__(self):
        if self.image_neg is not None and self.image_pos is None:
            raise InvalidInputError("image_neg requires image_pos")

    @property
    def n_images(self):
        return (self.image_pos is not None) + (self.image_neg is not None)


@dataclass
class NoisePredictionQuad:
    eps_uncond: np.ndarray
    eps_text: np.ndarray
    eps_text_pos: Optional[np.ndarray] = None
    eps_text_pos_neg: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.eps_text_pos_neg is not None and self.eps_text_pos is None:
            raise InvalidInputError("eps_text_pos_neg requires eps_text_pos")
        shape = None
        for name in ("eps_uncond", "eps_text", "eps_text_pos", "eps_text_pos_neg"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.size == 0:
                raise InvalidInputError(f"{name} is empty")
            if shape is None:
                shape = value.shape
            elif value.shape != shape:
                raise InvalidInputError(
                    f"{name} has shape {value.shape}, expected {shape}"
                )
            setattr(self, name, value)

    @property
    def n_branches(self):
        return 2 + (self.eps_text_pos is not None) + (self.eps_text_pos_neg is not None)

    def matches(self, conditions: ConditionSet) -> bool:
        return self.n_branches == required_passes(conditions)


def _check_weight(name, w):
    w = float(w)
    if not np.isfinite(w):
        raise InvalidInputError(f"{name} must be finite, got {w}")
    return w


def combine_text_cfg(quad: NoisePredictionQuad, w_text: float) -> np.ndarray:
    """``eps_uncond + w_text * (eps_text - eps_uncond)``."""
    w_text = _check_weight("w_text", w_text)
    u, t = quad.eps_uncond, quad.eps_text
    return u + w_text * (t - u)


def combine_single_image_cfg(
    quad: NoisePredictionQuad, w_text: float, w_im_pos: float
) -> np.ndarray:
    """Text guidance plus one image prompt stacked on the text-conditional branch."""
    if quad.eps_text_pos is None:
        raise InvalidInputError("single-image guidance needs eps_text_pos")
    w_im_pos = _check_weight("w_im_pos", w_im_pos)
    out = combine_text_cfg(quad, w_text)
    return out + w_im_pos * (quad.eps_text_pos - quad.eps_text)


def combine_dual_cfg(quad: NoisePredictionQuad, weights: GuidanceWeights) -> np.ndarray:
    """Positive and negative image guidance.

    The negative branch is conditioned on text and both images and is measured
    against the text+positive branch; its scale is subtracted::

        u + w_text (t - u) + w_im_pos (tp - t) - w_im_neg (tpn - tp)
    """
    if quad.eps_text_pos is None or quad.eps_text_pos_neg is None:
        raise InvalidInputError("dual guidance needs all four branches")
    w_im_neg = _check_weight("w_im_neg", weights.w_im_neg)
    out = combine_single_image_cfg(quad, weights.w_text, weights.w_im_pos)
    return out - w_im_neg * (quad.eps_text_pos_neg - quad.eps_text_pos)


def combine(quad: NoisePredictionQuad, weights: GuidanceWeights) -> np.ndarray:
    """Dispatch on the branches present in ``quad``."""
    if quad.eps_text_pos_neg is not None:
        return combine_dual_cfg(quad, weights)
    if quad.eps_text_pos is not None:
        return combine_single_image_cfg(quad, weights.w_text, weights.w_im_pos)
    return combine_text_cfg(quad, weights.w_text)


def required_passes(conditions: ConditionSet) -> int:
    """Denoiser evaluations per sampling step: 2, 3 or 4."""
    return 2 + conditions.n_images
