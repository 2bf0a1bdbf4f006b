"""Hot numeric kernels with a numba path and a pure-numpy path.

Each kernel exists twice: ``<name>_numpy`` (vectorised numpy) and
``<name>_numba`` (explicit loops under ``@njit``). The public name is bound to
one of them at import time according to :data:`dualguide._accel.USE_NUMBA`.
Both paths must agree to floating-point rounding; the test suite checks this.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "class_cosine_means",
    "categorical_draws",
    "guided_ddim_gaussian",
    "KERNELS",
]


# ---------------------------------------------------------------------------
# averaged pairwise cosine similarity between classes


def class_cosine_means_numpy(vectors, labels, n_classes):
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    unit = vectors / norms[:, None]
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    centroid = np.zeros((n_classes, vectors.shape[1]))
    np.add.at(centroid, labels, unit)
    centroid /= counts[:, None]
    # mean_{a in i, b in j} <u_a, u_b> == <mean_i u, mean_j u>
    sim = centroid @ centroid.T
    sim = 0.5 * (sim + sim.T)
    return np.clip(sim, -1.0, 1.0)


@njit(cache=True)
def class_cosine_means_numba(vectors, labels, n_classes):
    n, d = vectors.shape
    unit = np.empty((n, d))
    for a in range(n):
        s = 0.0
        for k in range(d):
            s += vectors[a, k] * vectors[a, k]
        s = np.sqrt(s)
        for k in range(d):
            unit[a, k] = vectors[a, k] / s
    counts = np.zeros(n_classes)
    centroid = np.zeros((n_classes, d))
    for a in range(n):
        c = labels[a]
        counts[c] += 1.0
        for k in range(d):
            centroid[c, k] += unit[a, k]
    for c in range(n_classes):
        for k in range(d):
            centroid[c, k] /= counts[c]
    sim = np.empty((n_classes, n_classes))
    for i in range(n_classes):
        for j in range(i, n_classes):
            dot = 0.0
            for k in range(d):
                dot += centroid[i, k] * centroid[j, k]
            v = min(1.0, max(-1.0, dot))
            sim[i, j] = v
            sim[j, i] = v
    return sim


# ---------------------------------------------------------------------------
# inverse-CDF categorical sampling


def categorical_draws_numpy(cdf, uniforms):
    return np.searchsorted(cdf, uniforms, side="right").astype(np.int64)


@njit(cache=True)
def categorical_draws_numba(cdf, uniforms):
    n = uniforms.shape[0]
    m = cdf.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        u = uniforms[i]
        lo = 0
        hi = m
        # first index with cdf[idx] > u
        while lo < hi:
            mid = (lo + hi) // 2
            if cdf[mid] <= u:
                lo = mid + 1
            else:
                hi = mid
        out[i] = lo
    return out


# ---------------------------------------------------------------------------
# guided deterministic DDIM over isotropic Gaussian branches
#
# Branch order: uncond, text, text+pos, text+pos+neg. ``n_branches`` is 2, 3
# or 4; trailing branches are ignored. Weights are (w_text, w_im_pos, w_im_neg)
# with w_im_neg a nonnegative magnitude.


def guided_ddim_gaussian_numpy(x, alpha_path, means, variances, weights, n_branches):
    x = np.array(x, dtype=np.float64, copy=True)
    w_text, w_pos, w_neg = weights
    for s in range(alpha_path.shape[0] - 1):
        at = alpha_path[s]
        an = alpha_path[s + 1]
        sq_at = np.sqrt(at)
        sq_1mat = np.sqrt(1.0 - at)
        eps = [
            sq_1mat * (x - sq_at * means[k]) / (at * variances[k] + 1.0 - at)
            for k in range(n_branches)
        ]
        e = eps[0] + w_text * (eps[1] - eps[0])
        if n_branches > 2:
            e = e + w_pos * (eps[2] - eps[1])
        if n_branches > 3:
            e = e - w_neg * (eps[3] - eps[2])
        x0 = (x - sq_1mat * e) / sq_at
        x = np.sqrt(an) * x0 + np.sqrt(1.0 - an) * e
    return x


@njit(cache=True)
def guided_ddim_gaussian_numba(x, alpha_path, means, variances, weights, n_branches):
    out = x.copy()
    n, d = out.shape
    w_text = weights[0]
    w_pos = weights[1]
    w_neg = weights[2]
    eps = np.empty(4)
    for s in range(alpha_path.shape[0] - 1):
        at = alpha_path[s]
        an = alpha_path[s + 1]
        sq_at = np.sqrt(at)
        sq_1mat = np.sqrt(1.0 - at)
        sq_an = np.sqrt(an)
        sq_1man = np.sqrt(1.0 - an)
        for i in range(n):
            for k in range(d):
                xv = out[i, k]
                for b in range(n_branches):
                    eps[b] = sq_1mat * (xv - sq_at * means[b, k]) / (
                        at * variances[b] + 1.0 - at
                    )
                e = eps[0] + w_text * (eps[1] - eps[0])
                if n_branches > 2:
                    e = e + w_pos * (eps[2] - eps[1])
                if n_branches > 3:
                    e = e - w_neg * (eps[3] - eps[2])
                x0 = (xv - sq_1mat * e) / sq_at
                out[i, k] = sq_an * x0 + sq_1man * e
    return out


KERNELS = {
    "numpy": {
        "class_cosine_means": class_cosine_means_numpy,
        "categorical_draws": categorical_draws_numpy,
        "guided_ddim_gaussian": guided_ddim_gaussian_numpy,
    },
    "numba": {
        "class_cosine_means": class_cosine_means_numba,
        "categorical_draws": categorical_draws_numba,
        "guided_ddim_gaussian": guided_ddim_gaussian_numba,
    },
}

_active = KERNELS["numba" if USE_NUMBA else "numpy"]
class_cosine_means = _active["class_cosine_means"]
categorical_draws = _active["categorical_draws"]
guided_ddim_gaussian = _active["guided_ddim_gaussian"]
