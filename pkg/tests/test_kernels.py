import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualguide import kernels
from dualguide.backends import NoiseSchedule

NP, NB = kernels.KERNELS["numpy"], kernels.KERNELS["numba"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 12))
def test_similarity_kernels_agree(seed, n_classes, dim):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, 10)])
    vecs = rng.normal(size=(labels.size, dim)) + 0.1
    np.testing.assert_allclose(
        NP["class_cosine_means"](vecs, labels, n_classes),
        NB["class_cosine_means"](vecs, labels, n_classes),
        atol=1e-12,
    )


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_categorical_kernels_agree(seed, m):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(m))
    p[rng.integers(m)] = 0.0
    p /= p.sum()
    cdf = np.cumsum(p)
    cdf[np.flatnonzero(p > 0)[-1]:] = 1.0
    u = rng.random(500)
    a, b = NP["categorical_draws"](cdf, u), NB["categorical_draws"](cdf, u)
    assert np.array_equal(a, b)
    assert not np.any(p[a] == 0)


@pytest.mark.parametrize("n_branches", [2, 3, 4])
def test_sampler_kernels_agree(n_branches):
    rng = np.random.default_rng(n_branches)
    path = NoiseSchedule.linear(1000, 50).alpha_path()
    x = rng.normal(size=(32, 5))
    args = (path, rng.normal(size=(4, 5)), rng.uniform(0.1, 2, 4), np.array([3.0, 1.2, 0.8]), n_branches)
    np.testing.assert_allclose(NP["guided_ddim_gaussian"](x, *args), NB["guided_ddim_gaussian"](x, *args), rtol=1e-11, atol=1e-11)


def test_active_kernels_follow_flag():
    code = "import dualguide.kernels as k, dualguide._accel as a; print(a.USE_NUMBA, k.class_cosine_means.__name__)"
    for flag, expected in (("0", "False class_cosine_means_numpy"), ("1", "True class_cosine_means_numba")):
        env = {**os.environ, "DUALGUIDE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == expected
