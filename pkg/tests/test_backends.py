import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualguide.backends import (
    AnalyticBackend,
    DenoiserBackend,
    DiffusionState,
    ExternalBackendConfig,
    GaussianCondition,
    InstrumentedBackend,
    NoiseSchedule,
    ToyImageBackend,
    analytic_eps,
    ddim_step,
    load_backend,
    sample,
    sample_analytic,
    tilted_moments,
)
from dualguide.errors import (
    BackendError,
    BackendUnavailableError,
    InvalidInputError,
    NonNormalizableTiltError,
)
from dualguide.guidance import ConditionSet, GuidanceWeights, NoisePredictionQuad, combine_dual_cfg

FULL = NoiseSchedule.linear(num_inference_steps=1000)


def gauss(mean, var):
    return GaussianCondition(np.atleast_1d(np.asarray(mean, float)), var)


# -- analytic_eps ------------------------------------------------------------


def test_eps_vanishes_at_marginal_mean():
    g = gauss([1.0, -2.0], 0.7)
    a = 0.4
    assert np.array_equal(analytic_eps(np.sqrt(a) * g.mean, a, g), np.zeros(2))


def test_eps_point_mass_is_injected_noise(rng):
    g = gauss(rng.normal(size=3), 0.0)
    a = 0.3
    noise = rng.normal(size=3)
    x = np.sqrt(a) * g.mean + np.sqrt(1 - a) * noise
    np.testing.assert_allclose(analytic_eps(x, a, g), noise, rtol=1e-12)


def test_eps_scalar_example():
    expected = math.sqrt(0.25) * (2 - math.sqrt(0.75) * 2) / (0.75 * 1 + 0.25)
    assert analytic_eps(2.0, 0.75, gauss(2.0, 1.0))[0] == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.13397, abs=1e-5)


def test_eps_alpha_bounds():
    for a in (0.0, -0.1, 1.01):
        with pytest.raises(InvalidInputError):
            analytic_eps(0.0, a, gauss(0.0, 1.0))


@given(
    st.floats(0.01, 0.99),
    st.floats(0.0, 5.0),
    st.floats(-3, 3),
    st.floats(-5, 5),
)
def test_eps_affine_with_stated_slope(a, var, mu, x):
    g = gauss(mu, var)
    slope = math.sqrt(1 - a) / (a * var + 1 - a)
    e0, e1 = analytic_eps(x, a, g)[0], analytic_eps(x + 1.0, a, g)[0]
    assert e1 - e0 == pytest.approx(slope, rel=1e-9, abs=1e-12)


def _logpdf(x, a, g):
    v = a * g.variance + 1 - a
    return -0.5 * np.sum((x - np.sqrt(a) * g.mean) ** 2) / v - 0.5 * x.size * np.log(2 * np.pi * v)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_eps_matches_finite_difference_score(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    g = gauss(rng.normal(size=d), float(rng.uniform(0, 3)))
    a = float(rng.uniform(0.02, 0.98))
    x = 2 * rng.normal(size=d)
    h = 1e-4
    grad = np.array([(_logpdf(x + h * e, a, g) - _logpdf(x - h * e, a, g)) / (2 * h) for e in np.eye(d)])
    fd = -np.sqrt(1 - a) * grad
    assert np.linalg.norm(analytic_eps(x, a, g) - fd) <= 1e-6 * np.linalg.norm(fd) + 1e-12


# -- schedule / ddim_step -------------------------------------------------------


def test_schedule_shape_and_validation():
    s = NoiseSchedule.linear(1000, 50)
    ts = s.timesteps()
    assert ts[0] == 1000 and ts[-1] == 0 and ts.size == 51 and np.all(np.diff(ts) < 0)
    assert s.alpha_bar[0] == 1.0
    with pytest.raises(InvalidInputError):
        NoiseSchedule(np.array([1.0, 0.5, 0.6]))
    with pytest.raises(InvalidInputError):
        NoiseSchedule(np.array([1.0, 0.5, 0.0]))
    with pytest.raises(InvalidInputError):
        NoiseSchedule.linear(10, 11)


def test_ddim_final_projection():
    s = NoiseSchedule(np.array([1.0, 0.75, 0.25]), 2)
    st_ = DiffusionState(np.array([1.0]), 2, 0.25)
    out = ddim_step(st_, np.array([1.0]), s, 0)
    x0 = (1.0 - math.sqrt(0.75) * 1.0) / math.sqrt(0.25)
    assert out.x[0] == pytest.approx(x0, rel=1e-15)


def test_ddim_fixed_point():
    # strictly decreasing schedules cannot repeat alpha; with eps=0 the update
    # is the pure rescale sqrt(a_next/a_t), which is 1 when they coincide
    s = NoiseSchedule(np.array([1.0, 0.75, 0.25]), 2)
    x = np.array([0.4, -1.0])
    out = ddim_step(DiffusionState(x, 2, 0.25), np.zeros(2), s, 1)
    np.testing.assert_allclose(out.x, x * math.sqrt(0.75) / math.sqrt(0.25), rtol=1e-15)


def test_ddim_scalar_example():
    s = NoiseSchedule(np.array([1.0, 0.75, 0.25]), 2)
    out = ddim_step(DiffusionState(np.array([1.0]), 2, 0.25), np.array([1.0]), s, 1)
    x0 = (1 - math.sqrt(0.75)) / 0.5
    assert x0 == pytest.approx(0.26795, abs=1e-5)
    assert out.x[0] == pytest.approx(math.sqrt(0.75) * x0 + 0.5, rel=1e-15)
    assert out.x[0] == pytest.approx(0.73205, abs=1e-5)


def test_ddim_rejects_backward_time():
    s = NoiseSchedule(np.array([1.0, 0.75, 0.25]), 2)
    with pytest.raises(InvalidInputError):
        ddim_step(DiffusionState(np.zeros(1), 1, 0.75), np.zeros(1), s, 2)


# -- sampling ---------------------------------------------------------------


@pytest.mark.parametrize("steps", [10, 50, 1000])
def test_point_mass_convergence(steps):
    mu = np.array([0.5, -1.5, 2.0])
    g = gauss(mu, 0.0)
    backend = AnalyticBackend(g)
    x = sample(backend, ConditionSet(g, g, g), GuidanceWeights(3.0, 2.0, 1.0), NoiseSchedule.linear(1000, steps), seed=4, n_samples=16)
    assert np.max(np.abs(x - mu)) <= 1e-6


def test_sample_reproducible():
    g = [gauss(np.arange(3.0) * k, 0.5) for k in range(4)]
    backend = AnalyticBackend(g[0])
    cond = ConditionSet(g[1], g[2], g[3])
    w = GuidanceWeights(2, 1.5, 0.5)
    s = NoiseSchedule.linear()
    a = sample(backend, cond, w, s, seed=9)
    b = sample(backend, cond, w, s, seed=9)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample(backend, cond, w, s, seed=10))


def test_fast_path_matches_generic():
    g = [gauss(np.linspace(-1, 1, 4) * k, 0.3 + 0.2 * k) for k in range(4)]
    backend = AnalyticBackend(g[0])
    s = NoiseSchedule.linear(1000, 50)
    for cond in (ConditionSet(g[1]), ConditionSet(g[1], g[2]), ConditionSet(g[1], g[2], g[3])):
        w = GuidanceWeights(2.5, 1.0, 0.7)
        a = sample(backend, cond, w, s, seed=3, n_samples=64)
        b = sample_analytic(backend, cond, w, s, seed=3, n_samples=64)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_conditional_moments_match_data_distribution():
    # weights (1, 0, 0): pure text-conditional sampling
    text = gauss([1.0, -0.5], 0.8)
    backend = AnalyticBackend(gauss([0.0, 0.0], 1.0))
    x = sample(backend, ConditionSet(text), GuidanceWeights(1.0, 0.0, 0.0), FULL, seed=1, n_samples=10_000)
    n = x.shape[0]
    z_mean = (x.mean(0) - text.mean) / np.sqrt(text.variance / n)
    z_var = (x.var(0, ddof=1) - text.variance) / (text.variance * np.sqrt(2 / (n - 1)))
    assert np.all(np.abs(z_mean) <= 4) and np.all(np.abs(z_var) <= 4)


def test_dual_guided_moments_match_tilted():
    g = [gauss([0.0], 0.6), gauss([1.0], 0.6), gauss([2.0], 0.6), gauss([3.0], 0.6)]
    w = GuidanceWeights(2.0, 1.5, 0.5)
    x = sample(AnalyticBackend(g[0]), ConditionSet(g[1], g[2], g[3]), w, FULL, seed=2, n_samples=10_000)
    mean, var = tilted_moments(g, w, 1.0)
    assert mean[0] == pytest.approx(3.0)
    n = x.shape[0]
    assert abs(x.mean() - mean[0]) <= 4 * np.sqrt(var / n)
    assert abs(x.var(ddof=1) - var) <= 4 * var * np.sqrt(2 / (n - 1))


def test_backend_failure_carries_step():
    class Flaky(AnalyticBackend):
        def predict(self, state, branch):
            if state.t_index < 500:
                raise RuntimeError("boom")
            return super().predict(state, branch)

    g = gauss([0.0], 1.0)
    with pytest.raises(BackendError) as info:
        sample(Flaky(g), ConditionSet(g), GuidanceWeights(1, 0, 0), NoiseSchedule.linear(1000, 10), seed=0)
    # visited t: 1000, 900, ..., 500, 400 -> first failure at step 6
    assert info.value.step == 6
    assert "step 6" in str(info.value)


def test_instrumented_counts():
    g = gauss([0.0, 1.0], 1.0)
    for cond, expected in ((ConditionSet(g), 2), (ConditionSet(g, g), 3), (ConditionSet(g, g, g), 4)):
        b = InstrumentedBackend(AnalyticBackend(g))
        sample(b, cond, GuidanceWeights(), NoiseSchedule.linear(1000, 50), seed=0)
        assert len(b.passes) == 50
        assert set(b.passes.values()) == {expected}


def test_base_backend_is_abstract():
    with pytest.raises(NotImplementedError):
        DenoiserBackend().predict(DiffusionState(np.zeros(1), 1, 0.5), ())


# -- tilted_moments ----------------------------------------------------------


def test_tilted_reduces_to_text_branch():
    g = [gauss([0.3], 1.5), gauss([2.0], 0.4), gauss([9.0], 3.0), gauss([-4.0], 0.1)]
    for a in (0.2, 0.7, 1.0):
        mean, var = tilted_moments(g, GuidanceWeights(1.0, 0.0, 0.0), a)
        assert mean[0] == pytest.approx(np.sqrt(a) * 2.0, rel=1e-12)
        assert var == pytest.approx(a * 0.4 + 1 - a, rel=1e-12)


def test_tilted_identical_branches():
    g = [gauss([1.0, 2.0], 0.9)] * 4
    mean, var = tilted_moments(g, GuidanceWeights(4.0, 3.0, 2.5), 0.5)
    np.testing.assert_allclose(mean, np.sqrt(0.5) * np.array([1.0, 2.0]), rtol=1e-12)
    assert var == pytest.approx(0.5 * 0.9 + 0.5, rel=1e-12)


def test_tilted_scalar_example():
    g = [gauss(0, 1), gauss(1, 1), gauss(2, 1), gauss(3, 1)]
    mean, var = tilted_moments(g, GuidanceWeights(2, 1.5, 0.5), 1.0)
    assert mean[0] == pytest.approx(0 + 2 * 1 + 1.5 * 1 - 0.5 * 1, rel=1e-14)
    assert var == pytest.approx(1.0, rel=1e-14)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_tilted_matches_combined_affine_eps(seed):
    # independent route: read slope and intercept of the guided eps numerically
    rng = np.random.default_rng(seed)
    a = float(rng.uniform(0.05, 0.95))
    g = [gauss(rng.normal(), float(rng.uniform(0.1, 2))) for _ in range(4)]
    w = GuidanceWeights(*rng.uniform(0, 3, 3))

    def guided(x):
        q = NoisePredictionQuad(*(analytic_eps(x, a, gk) for gk in g))
        return combine_dual_cfg(q, w)[0]

    slope = guided(1.0) - guided(0.0)
    if slope <= 1e-9:
        with pytest.raises(NonNormalizableTiltError):
            tilted_moments(g, w, a)
        return
    # eps = sqrt(1-a)(x - m)/v  => v = sqrt(1-a)/slope, m = -guided(0)/slope
    mean, var = tilted_moments(g, w, a)
    assert var == pytest.approx(np.sqrt(1 - a) / slope, rel=1e-8)
    assert mean[0] == pytest.approx(-guided(0.0) / slope, rel=1e-7, abs=1e-9)


def test_tilted_non_normalizable():
    g = [gauss(0, 0.01), gauss(0, 5.0), gauss(0, 5.0), gauss(0, 0.01)]
    with pytest.raises(NonNormalizableTiltError):
        tilted_moments(g, GuidanceWeights(1.0, 0.0, 5.0), 1.0)


# -- toy image backend & registry --------------------------------------------


def test_toy_image_backend_branches():
    protos = {"A photo of a cat": np.ones((2, 2)), "A photo of a dog": -np.ones((2, 2))}
    b = ToyImageBackend(protos, (2, 2), noise_var=0.5)
    pos = np.full((2, 2), 3.0)
    neg = np.full((2, 2), -5.0)
    branches = b.branches(ConditionSet("A photo of a cat", pos, neg))
    np.testing.assert_allclose(branches[0].mean, 0.0)
    np.testing.assert_allclose(branches[1].mean, 1.0)
    np.testing.assert_allclose(branches[2].mean, 2.0)
    np.testing.assert_allclose(branches[3].mean, 2.0 + 0.5 * (-5.0 - 2.0))
    with pytest.raises(InvalidInputError):
        b.branch_gaussian(("A photo of a cow",))
    with pytest.raises(InvalidInputError):
        b.branch_gaussian(("A photo of a cat", np.zeros((3, 3))))


def test_registry():
    with pytest.raises(BackendUnavailableError):
        load_backend("external", config=ExternalBackendConfig())
    b = load_backend("toy", prototypes={"p": np.zeros(3)}, image_shape=(3,))
    assert isinstance(b, ToyImageBackend)
    with pytest.raises(InvalidInputError):
        ExternalBackendConfig(null_text="zeros")
