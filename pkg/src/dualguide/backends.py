"""Denoiser backends, noise schedule and the guided DDIM sampler.

The analytic backend predicts the exact noise of isotropic Gaussian data, so
every guidance term is an affine function of ``x``. That makes the effective
distribution targeted by a weighted combination of branches computable in
closed form (:func:`tilted_moments`).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import kernels
from .errors import (
    BackendError,
    BackendUnavailableError,
    InvalidInputError,
    NonNormalizableTiltError,
    SingularityError,
)
from .guidance import ConditionSet, GuidanceWeights, NoisePredictionQuad, combine

__all__ = [
    "NoiseSchedule",
    "DiffusionState",
    "GaussianCondition",
    "DenoiserBackend",
    "AnalyticBackend",
    "ToyImageBackend",
    "InstrumentedBackend",
    "ExternalBackendConfig",
    "ExternalImageAdapterBackend",
    "analytic_eps",
    "ddim_step",
    "sample",
    "sample_analytic",
    "tilted_moments",
    "register_backend",
    "load_backend",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels ``alpha_bar[t]`` for ``t = 0..T``.

    ``alpha_bar[0] == 1`` is clean data; training timesteps are ``1..T``.
    """

    alpha_bar: np.ndarray
    num_inference_steps: int = 50

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise InvalidInputError("alpha_bar needs at least two entries")
        if not np.all(np.isfinite(ab)) or ab.min() <= 0 or ab.max() > 1:
            raise InvalidInputError("alpha_bar values must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0):
            raise InvalidInputError("alpha_bar must be strictly decreasing")
        steps = int(self.num_inference_steps)
        if not 1 <= steps <= ab.size - 1:
            raise InvalidInputError(
                f"num_inference_steps must be in [1, {ab.size - 1}], got {steps}"
            )
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "num_inference_steps", steps)

    @classmethod
    def linear(cls, num_train_steps=1000, num_inference_steps=50, alpha_bar_min=1e-8):
        """``alpha_bar`` linear from 1 at t=0 down to ``alpha_bar_min`` at t=T."""
        if not 0 < alpha_bar_min < 1:
            raise InvalidInputError("alpha_bar_min must be in (0, 1)")
        ab = np.linspace(1.0, alpha_bar_min, num_train_steps + 1)
        return cls(ab, num_inference_steps)

    @property
    def num_train_steps(self):
        return self.alpha_bar.size - 1

    def timesteps(self):
        """Descending visited indices, ``T`` first and ``0`` last (length steps+1)."""
        T = self.num_train_steps
        return np.round(np.linspace(T, 0, self.num_inference_steps + 1)).astype(np.int64)

    def alpha_path(self):
        return self.alpha_bar[self.timesteps()]

    def describe(self):
        return {
            "kind": "alpha_bar",
            "num_train_steps": self.num_train_steps,
            "num_inference_steps": self.num_inference_steps,
            "alpha_bar_max_t": float(self.alpha_bar[-1]),
        }


@dataclass
class DiffusionState:
    """Noisy sample ``x`` at schedule index ``t_index``.

    ``alpha_bar`` is the schedule value at ``t_index``; the sampler fills it in
    so backends need not hold a schedule.
    """

    x: np.ndarray
    t_index: int
    alpha_bar: Optional[float] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(self.x)):
            raise InvalidInputError(f"non-finite sample at t={self.t_index}")


@dataclass(frozen=True)
class GaussianCondition:
    """Isotropic Gaussian ``N(mean, variance * I)``."""

    mean: np.ndarray
    variance: float

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if not np.all(np.isfinite(mean)):
            raise InvalidInputError("mean must be finite")
        if not (np.isfinite(self.variance) and self.variance >= 0):
            raise InvalidInputError(f"variance must be >= 0, got {self.variance}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", float(self.variance))


def _check_alpha(alpha_bar_t):
    a = float(alpha_bar_t)
    if not 0 < a <= 1:
        raise InvalidInputError(f"alpha_bar must be in (0, 1], got {a}")
    return a


def analytic_eps(x, alpha_bar_t, cond: GaussianCondition):
    """Exact noise prediction for data ``cond`` noised to level ``alpha_bar_t``.

    The noised marginal is ``N(sqrt(a) mu, (a s2 + 1 - a) I)`` and the
    noise-parameterised score is ``sqrt(1-a) (x - sqrt(a) mu) / (a s2 + 1 - a)``.
    """
    a = _check_alpha(alpha_bar_t)
    x = np.asarray(x, dtype=np.float64)
    var = a * cond.variance + 1.0 - a
    if var == 0.0:
        raise SingularityError("noise undefined for point-mass data at alpha_bar=1")
    return np.sqrt(1.0 - a) * (x - np.sqrt(a) * cond.mean) / var


def ddim_step(state: DiffusionState, eps_hat, schedule: NoiseSchedule, next_index: int):
    """Deterministic (eta=0) DDIM update from ``state.t_index`` to ``next_index``."""
    if not 0 <= next_index < state.t_index:
        raise InvalidInputError(
            f"next_index {next_index} must be below t_index {state.t_index}"
        )
    at = schedule.alpha_bar[state.t_index]
    an = schedule.alpha_bar[next_index]
    if at == 0:
        raise SingularityError("alpha_bar_t == 0")
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0 = (state.x - np.sqrt(1.0 - at) * eps_hat) / np.sqrt(at)
    x = np.sqrt(an) * x0 + np.sqrt(1.0 - an) * eps_hat
    return DiffusionState(x, next_index, float(an))


class DenoiserBackend:
    """Maps a noisy state and a condition set to per-branch noise predictions.

    Subclasses implement :meth:`predict` for one branch. A branch is the tuple
    of active handles: ``()`` (unconditional), ``(text,)``, ``(text, pos)`` or
    ``(text, pos, neg)``. :meth:`evaluate` issues exactly the branches the
    condition set demands, one :meth:`predict` call (one forward pass) each.
    """

    name = "abstract"

    def predict(self, state: DiffusionState, branch: tuple) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, state: DiffusionState, conditions: ConditionSet) -> NoisePredictionQuad:
        eps_u = self.predict(state, ())
        eps_t = self.predict(state, (conditions.text,))
        eps_tp = eps_tpn = None
        if conditions.image_pos is not None:
            eps_tp = self.predict(state, (conditions.text, conditions.image_pos))
        if conditions.image_neg is not None:
            eps_tpn = self.predict(
                state, (conditions.text, conditions.image_pos, conditions.image_neg)
            )
        return NoisePredictionQuad(eps_u, eps_t, eps_tp, eps_tpn)

    def sample_shape(self, conditions: ConditionSet):
        raise NotImplementedError


class AnalyticBackend(DenoiserBackend):
    """Gaussian toy backend whose handles are the branch distributions.

    ``ConditionSet.text`` is the text-conditional Gaussian, ``image_pos`` the
    text+positive Gaussian and ``image_neg`` the text+positive+negative one.
    """

    name = "analytic"

    def __init__(self, uncond: GaussianCondition):
        self.uncond = uncond

    def branch_gaussian(self, branch) -> GaussianCondition:
        return self.uncond if not branch else branch[-1]

    def branches(self, conditions: ConditionSet):
        """The Gaussians of every branch demanded by ``conditions``, uncond first."""
        handles = [conditions.text, conditions.image_pos, conditions.image_neg]
        out = [self.branch_gaussian(())]
        for k in range(1, 2 + conditions.n_images):
            out.append(self.branch_gaussian(tuple(handles[:k])))
        return out

    def predict(self, state, branch):
        if state.alpha_bar is None:
            raise InvalidInputError("analytic backend needs state.alpha_bar")
        return analytic_eps(state.x, state.alpha_bar, self.branch_gaussian(branch))

    def sample_shape(self, conditions):
        return self.uncond.mean.shape


class ToyImageBackend(AnalyticBackend):
    """Analytic backend over small rasters, driven by prompts and images.

    Text prompts resolve to class prototypes. With isotropic variance
    ``noise_var`` shared by every branch, the branch means are::

        uncond  global mean of the prototypes
        text    prototype m of the prompt's class
        +pos    (m + I+) / 2
        +neg    p + (I- - p) / 2,   p = (m + I+) / 2
    """

    name = "toy-image"

    def __init__(self, prototypes: Dict[str, np.ndarray], image_shape, noise_var=0.25):
        self.image_shape = tuple(image_shape)
        self.prototypes = {
            k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in prototypes.items()
        }
        self.noise_var = float(noise_var)
        center = np.mean(list(self.prototypes.values()), axis=0)
        super().__init__(GaussianCondition(center, self.noise_var))

    def _image(self, img):
        arr = np.asarray(img, dtype=np.float64)
        if arr.shape != self.image_shape:
            raise InvalidInputError(
                f"image shape {arr.shape} does not match backend input {self.image_shape}"
            )
        return arr.reshape(-1)

    def branch_gaussian(self, branch):
        if not branch:
            return self.uncond
        try:
            mean = self.prototypes[branch[0]]
        except KeyError:
            raise InvalidInputError(f"unknown prompt {branch[0]!r}") from None
        if len(branch) > 1:
            mean = 0.5 * (mean + self._image(branch[1]))
        if len(branch) > 2:
            mean = mean + 0.5 * (self._image(branch[2]) - mean)
        return GaussianCondition(mean, self.noise_var)

    def sample_shape(self, conditions):
        return (int(np.prod(self.image_shape)),)


class InstrumentedBackend(DenoiserBackend):
    """Wraps a backend and counts forward passes per timestep."""

    def __init__(self, inner: DenoiserBackend):
        self.inner = inner
        self.name = f"instrumented({inner.name})"
        self.passes: Dict[int, int] = {}

    def predict(self, state, branch):
        self.passes[state.t_index] = self.passes.get(state.t_index, 0) + 1
        return self.inner.predict(state, branch)

    def sample_shape(self, conditions):
        return self.inner.sample_shape(conditions)


def sample(
    backend: DenoiserBackend,
    conditions: ConditionSet,
    weights: GuidanceWeights,
    schedule: NoiseSchedule,
    seed: int,
    n_samples: Optional[int] = None,
    combiner: Callable = combine,
):
    """Guided deterministic DDIM from ``x_T ~ N(0, I)``.

    Returns one sample of shape ``backend.sample_shape(conditions)``, or a
    ``(n_samples, ...)`` batch. Randomness enters only through ``x_T``.
    """
    shape = tuple(backend.sample_shape(conditions))
    if n_samples is not None:
        shape = (int(n_samples),) + shape
    x = np.random.default_rng(seed).standard_normal(shape)
    ts = schedule.timesteps()
    state = DiffusionState(x, int(ts[0]), float(schedule.alpha_bar[ts[0]]))
    for step, nxt in enumerate(ts[1:]):
        try:
            quad = backend.evaluate(state, conditions)
        except Exception as exc:
            raise BackendError(f"{type(exc).__name__}: {exc}", step=step) from exc
        eps_hat = combiner(quad, weights)
        state = ddim_step(state, eps_hat, schedule, int(nxt))
    return state.x


def sample_analytic(
    backend: AnalyticBackend,
    conditions: ConditionSet,
    weights: GuidanceWeights,
    schedule: NoiseSchedule,
    seed: int,
    n_samples: int,
):
    """Batch sampler for analytic backends running the compiled kernel.

    Draws the same ``x_T`` as :func:`sample` and agrees with it to rounding.
    """
    branches = backend.branches(conditions)
    shape = tuple(backend.sample_shape(conditions))
    x = np.random.default_rng(seed).standard_normal((int(n_samples),) + shape)
    means = np.zeros((4,) + shape)
    variances = np.ones(4)
    for k, g in enumerate(branches):
        means[k] = g.mean
        variances[k] = g.variance
    flat = x.reshape(x.shape[0], -1)
    out = kernels.guided_ddim_gaussian(
        flat,
        np.ascontiguousarray(schedule.alpha_path()),
        means.reshape(4, -1),
        variances,
        np.array(weights.as_tuple()),
        len(branches),
    )
    return out.reshape(x.shape)


def guidance_coefficients(weights: GuidanceWeights, n_branches=4):
    """Per-branch coefficients of the guided prediction; they sum to 1."""
    w_t, w_p, w_n = weights.as_tuple()
    if n_branches == 2:
        return np.array([1.0 - w_t, w_t])
    if n_branches == 3:
        return np.array([1.0 - w_t, w_t - w_p, w_p])
    return np.array([1.0 - w_t, w_t - w_p, w_p + w_n, -w_n])


def tilted_moments(
    branches: Sequence[GaussianCondition], weights: GuidanceWeights, at_alpha_bar: float
):
    """Moments of the single Gaussian whose noise prediction equals the guided one.

    ``branches`` lists the unconditional Gaussian followed by the text,
    text+positive and text+positive+negative Gaussians (2 to 4 entries). Each
    branch score ``-(x - sqrt(a) mu_k) / v_k`` is affine in ``x``; the guided
    combination is again affine, with precision ``sum_k c_k / v_k``. Returns the
    ``(mean, variance)`` of the noised marginal at ``at_alpha_bar``.
    """
    a = _check_alpha(at_alpha_bar)
    if not 2 <= len(branches) <= 4:
        raise InvalidInputError("need 2 to 4 branches")
    coeffs = guidance_coefficients(weights, len(branches))
    precision = 0.0
    shift = np.zeros_like(branches[0].mean)
    for c, g in zip(coeffs, branches):
        v = a * g.variance + 1.0 - a
        if v == 0.0:
            raise InvalidInputError("point-mass branch at alpha_bar=1 has no score")
        precision += c / v
        shift = shift + c * np.sqrt(a) * g.mean / v
    if not precision > 0:
        raise NonNormalizableTiltError(
            f"non-normalizable tilt: combined precision {precision:.6g} <= 0"
        )
    return shift / precision, 1.0 / precision


# ---------------------------------------------------------------------------
# external backends


@dataclass
class ExternalBackendConfig:
    """Settings for a latent-diffusion backend with image-prompt adapters.

    ``null_text`` selects how the unconditional branch is formed
    (``"empty_prompt"`` or ``"null_embedding"``); ``image_absent`` selects how
    branches without an image prompt are formed (``"zero_embedding"`` or
    ``"drop_adapter"``). Neither choice is claimed to match any published run.
    """

    model_id: str = ""
    image_adapter_id: str = ""
    device: str = "cpu"
    null_text: str = "empty_prompt"
    image_absent: str = "zero_embedding"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.null_text not in ("empty_prompt", "null_embedding"):
            raise InvalidInputError(f"unknown null_text mode {self.null_text!r}")
        if self.image_absent not in ("zero_embedding", "drop_adapter"):
            raise InvalidInputError(f"unknown image_absent mode {self.image_absent!r}")


class ExternalImageAdapterBackend(DenoiserBackend):
    """Contract for a real denoiser with two image-prompt adapter slots.

    Implementations encode images once per item with :meth:`encode_image`,
    attach the embeddings to the ``(text, pos)`` and ``(text, pos, neg)``
    branches, and honour :class:`ExternalBackendConfig` for absent conditions.
    Register a factory with :func:`register_backend` under ``"external"``.
    """

    name = "external"

    def __init__(self, config: ExternalBackendConfig):
        self.config = config

    def encode_image(self, image) -> np.ndarray:
        raise NotImplementedError


_REGISTRY: Dict[str, Callable] = {}


def register_backend(name: str, factory: Callable):
    """Register ``factory(**kwargs) -> DenoiserBackend`` under ``name``."""
    _REGISTRY[name] = factory


def load_backend(name: str, **kwargs) -> DenoiserBackend:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise BackendUnavailableError(
            f"backend {name!r} is not registered (available: {sorted(_REGISTRY)})"
        ) from None
    try:
        return factory(**kwargs)
    except BackendUnavailableError:
        raise
    except ImportError as exc:
        raise BackendUnavailableError(f"backend {name!r}: {exc}") from exc


register_backend("toy", lambda prototypes, image_shape, noise_var=0.25, **_: ToyImageBackend(
    prototypes, image_shape, noise_var
))
