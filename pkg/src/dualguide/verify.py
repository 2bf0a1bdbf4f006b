"""Self-verification suite behind ``dualguide verify``.

Every check compares an implementation path against an independent oracle
(closed form, enumeration, finite differences or a goodness-of-fit test).
``mutate="negative-sign"`` swaps in a combinator with the sign of the
negative-image term flipped; the reduction identities cannot see that
mutation, the tilted-moment check must.
"""

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import kernels
from .backends import (
    AnalyticBackend,
    GaussianCondition,
    InstrumentedBackend,
    NoiseSchedule,
    analytic_eps,
    sample,
    tilted_moments,
)
from .classifier import LinearHead, Pool, epoch_batches, weighted_loss, weighted_loss_grad
from .guidance import (
    ConditionSet,
    GuidanceWeights,
    NoisePredictionQuad,
    combine,
    combine_dual_cfg,
    combine_single_image_cfg,
    combine_text_cfg,
    required_passes,
)
from .similarity import (
    EmbeddingTable,
    class_similarity_matrix,
    negative_distribution,
    sample_negative_class,
)

__all__ = ["CheckResult", "run_checks", "CHECKS", "flipped_negative_cfg", "MUTANTS"]


def flipped_negative_cfg(quad, weights):
    """Mutant: adds the negative-image term instead of subtracting it."""
    if quad.eps_text_pos_neg is None:
        return combine(quad, weights)
    out = combine_single_image_cfg(quad, weights.w_text, weights.w_im_pos)
    return out + weights.w_im_neg * (quad.eps_text_pos_neg - quad.eps_text_pos)


MUTANTS = {None: combine_dual_cfg, "negative-sign": flipped_negative_cfg}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rel_dev(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)))


def check_reduction(dual=combine_dual_cfg, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        shape = (int(rng.integers(1, 9)),)
        branches = [rng.normal(size=shape) for _ in range(4)]
        quad = NoisePredictionQuad(*branches)
        w_t, w_p = rng.uniform(0, 10, 2)
        single = combine_single_image_cfg(quad, w_t, w_p)
        worst = max(worst, _rel_dev(dual(quad, GuidanceWeights(w_t, w_p, 0.0)), single))
        text = combine_text_cfg(quad, w_t)
        worst = max(worst, _rel_dev(dual(quad, GuidanceWeights(w_t, 0.0, 0.0)), text))
        worst = max(worst, _rel_dev(combine_single_image_cfg(quad, w_t, 0.0), text))
    return worst <= 1e-12, f"max relative deviation {worst:.2e} over {n} quads (tol 1e-12)"


def check_pass_counts(steps=50):
    schedule = NoiseSchedule.linear(num_inference_steps=steps)
    g = [GaussianCondition(np.full(3, m), 1.0) for m in (0.0, 1.0, 2.0, 3.0)]
    cases = [ConditionSet(g[1]), ConditionSet(g[1], g[2]), ConditionSet(g[1], g[2], g[3])]
    seen = []
    ok = True
    for cond in cases:
        backend = InstrumentedBackend(AnalyticBackend(g[0]))
        sample(backend, cond, GuidanceWeights(2.0, 1.5, 0.5), schedule, seed=0)
        counts = set(backend.passes.values())
        ok &= len(backend.passes) == steps and counts == {required_passes(cond)}
        seen.append(sorted(counts))
    return ok, f"passes per step {seen} over {steps} steps (expect [[2], [3], [4]])"


def moment_configs(n_configs=5, seed=0):
    """Random branch means, one shared variance per config, random weights.

    With a shared variance the guided noise prediction is exactly the noise
    prediction of one Gaussian at every noise level, so the sampler targets
    the tilted distribution. The first config has ``w_im_neg > w_im_pos``.
    """
    rng = np.random.default_rng(seed)
    configs = []
    for k in range(n_configs):
        dim = int(rng.integers(1, 4))
        var = float(rng.uniform(0.25, 2.0))
        branches = [GaussianCondition(rng.uniform(-2, 2, dim), var) for _ in range(4)]
        w_t = float(rng.uniform(1, 4))
        w_p, w_n = (float(v) for v in rng.uniform(0, 2, 2))
        if k == 0:
            w_p, w_n = min(w_p, w_n), max(w_p, w_n) + 0.5
        configs.append((branches, GuidanceWeights(w_t, w_p, w_n)))
    return configs


def moment_zscores(branches, weights, n_samples=10_000, seed=0, combiner=combine_dual_cfg, steps=1000):
    """Largest |z| of sample mean and variance against :func:`tilted_moments`."""
    schedule = NoiseSchedule.linear(num_inference_steps=steps)
    backend = AnalyticBackend(branches[0])
    cond = ConditionSet(branches[1], branches[2], branches[3])
    x = sample(backend, cond, weights, schedule, seed, n_samples=n_samples, combiner=combiner)
    mean, var = tilted_moments(branches, weights, 1.0)
    n = x.shape[0]
    z_mean = (x.mean(axis=0) - mean) / np.sqrt(var / n)
    # variance of the sample variance for Gaussian data
    z_var = (x.var(axis=0, ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
    return float(np.max(np.abs(z_mean))), float(np.max(np.abs(z_var)))


def check_tilted(combiner=combine_dual_cfg, n_samples=10_000):
    worst = []
    ok = True
    for k, (branches, weights) in enumerate(moment_configs()):
        zm, zv = moment_zscores(branches, weights, n_samples, seed=100 + k, combiner=combiner)
        ok &= zm <= 4 and zv <= 4
        worst.append(f"{max(zm, zv):.2f}")
    return ok, f"max |z| per config [{', '.join(worst)}] (tol 4 SE, {n_samples} samples)"


def _log_density(x, a, g):
    v = a * g.variance + 1 - a
    return -0.5 * np.sum((x - np.sqrt(a) * g.mean) ** 2) / v - 0.5 * x.size * np.log(2 * np.pi * v)


def check_score(n=100, h=1e-4, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 5))
        g = GaussianCondition(rng.normal(size=dim), float(rng.uniform(0, 3)))
        a = float(rng.uniform(0.01, 0.99))
        x = rng.normal(size=dim) * 2
        grad = np.empty(dim)
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = h
            grad[i] = (_log_density(x + e, a, g) - _log_density(x - e, a, g)) / (2 * h)
        fd = -np.sqrt(1 - a) * grad
        eps = analytic_eps(x, a, g)
        worst = max(worst, float(np.linalg.norm(eps - fd) / np.linalg.norm(fd)))
    return worst <= 1e-6, f"max relative error {worst:.2e} on {n} triples (tol 1e-6)"


def check_negative_sampling(n_classes=10, draws=100_000, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), 4)
    centers = rng.normal(size=(n_classes, 16))
    table = EmbeddingTable(centers[labels] + 0.8 * rng.normal(size=(labels.size, 16)), labels, [f"c{i}" for i in range(n_classes)])
    matrix = class_similarity_matrix(table)
    worst_p = 1.0
    anchor_hits = 0
    for a in range(n_classes):
        dist = negative_distribution(matrix, a)
        got = np.bincount(sample_negative_class(dist, rng, size=draws), minlength=n_classes)
        anchor_hits += int(got[a])
        keep = np.arange(n_classes) != a
        p = stats.chisquare(got[keep], dist.probs[keep] * draws).pvalue
        worst_p = min(worst_p, p)
    # Bonferroni over anchors keeps the family-wise level at 0.01
    ok = worst_p > 0.01 / n_classes and anchor_hits == 0
    return ok, f"min chi-square p {worst_p:.3g} over {n_classes} anchors, anchor draws {anchor_hits}"


def check_similarity():
    vecs = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0], [0, 0, 2.0], [3.0, 0, 0]])
    labels = np.array([0, 0, 1, 2, 2])
    m = class_similarity_matrix(EmbeddingTable(vecs, labels, ["a", "b", "c"])).sim
    # pairs enumerated by hand: a={e1,e2}, b={e1}, c={e3,e1}
    expected = np.array([
        [0.5, 0.5, 0.25],
        [0.5, 1.0, 0.5],
        [0.25, 0.5, 0.5],
    ])
    dev = float(np.max(np.abs(m - expected)))
    return dev <= 1e-12, f"max deviation {dev:.1e} from enumerated fixture (tol 1e-12)"


def check_loss_gradient(seed=0, h=1e-5):
    rng = np.random.default_rng(seed)
    d, k, n = 5, 3, 6
    xr, xs = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    tr, ts = rng.integers(0, k, n), rng.integers(0, k, n)
    head = LinearHead(d, k)
    head.weight[...] = rng.normal(size=(d, k))
    head.bias[...] = rng.normal(size=k)
    worst_aff, worst_grad = 0.0, 0.0
    l0 = weighted_loss(head.forward(xr), tr, head.forward(xs), ts, 0.0)
    l1 = weighted_loss(head.forward(xr), tr, head.forward(xs), ts, 1.0)
    for lam in (0.0, 0.3, 0.8, 1.0):
        lr, lg = head.forward(xr), head.forward(xs)
        loss = weighted_loss(lr, tr, lg, ts, lam)
        worst_aff = max(worst_aff, abs(loss - (lam * l1 + (1 - lam) * l0)))
        _, dr, ds = weighted_loss_grad(lr, tr, lg, ts, lam)
        g = head.gradients(xr, dr)["weight"] + head.gradients(xs, ds)["weight"]
        fd = np.empty_like(g)
        for idx in np.ndindex(*g.shape):
            orig = head.weight[idx]
            head.weight[idx] = orig + h
            up = weighted_loss(head.forward(xr), tr, head.forward(xs), ts, lam)
            head.weight[idx] = orig - h
            dn = weighted_loss(head.forward(xr), tr, head.forward(xs), ts, lam)
            head.weight[idx] = orig
            fd[idx] = (up - dn) / (2 * h)
        denom = max(np.linalg.norm(fd), 1e-12)
        if lam == 0.0 or np.linalg.norm(g) > 0:
            worst_grad = max(worst_grad, float(np.linalg.norm(g - fd) / denom))
    ok = worst_aff <= 1e-12 and worst_grad <= 1e-4
    return ok, f"affine-in-lambda dev {worst_aff:.1e}, max gradient rel err {worst_grad:.1e} (tol 1e-4)"


def check_batches():
    real = Pool(np.arange(4.0)[:, None], np.zeros(4))
    synth = Pool(np.arange(200.0)[:, None], np.ones(200))
    counts = []
    ok = True
    rng = np.random.default_rng(0)
    for b in epoch_batches(real, synth, 32, rng, rng):
        n_real, n_synth = b.real_targets.size, b.synth_targets.size
        ok &= n_real == 16 and n_synth == 16
        ok &= set(b.real_index.tolist()) == {0, 1, 2, 3}
        counts.append((n_real, n_synth))
    return ok, f"{len(counts)} batches, compositions {sorted(set(counts))} (expect [(16, 16)])"


def check_kernels(seed=0):
    rng = np.random.default_rng(seed)
    numpy_k, numba_k = kernels.KERNELS["numpy"], kernels.KERNELS["numba"]
    vecs = rng.normal(size=(30, 8))
    labels = rng.integers(0, 5, 30)
    labels[:5] = np.arange(5)
    d1 = np.max(np.abs(numpy_k["class_cosine_means"](vecs, labels, 5) - numba_k["class_cosine_means"](vecs, labels, 5)))
    cdf = np.cumsum(np.full(7, 1 / 7))
    cdf[-1] = 1.0
    u = rng.random(1000)
    same = np.array_equal(numpy_k["categorical_draws"](cdf, u), numba_k["categorical_draws"](cdf, u))
    path = NoiseSchedule.linear(num_inference_steps=50).alpha_path()
    x = rng.normal(size=(64, 3))
    means = rng.normal(size=(4, 3))
    args = (path, means, np.array([0.5, 1.0, 1.5, 0.7]), np.array([2.0, 1.5, 0.5]), 4)
    d3 = np.max(np.abs(numpy_k["guided_ddim_gaussian"](x, *args) - numba_k["guided_ddim_gaussian"](x, *args)))
    ok = d1 <= 1e-12 and same and d3 <= 1e-9
    return ok, f"similarity dev {d1:.1e}, draws identical {same}, sampler dev {d3:.1e}"


def check_pipeline():
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        from .toy import make_toy_dataset

        cfg = make_toy_dataset(Path(tmp), n_synth_per_class=20, n_test=50)
        args = ["--config", str(cfg), "--quiet"]
        codes = [main(args + [cmd]) for cmd in ("similarity", "generate", "train", "eval")]
        import json

        acc = json.loads((Path(tmp) / "out" / "eval.json").read_text())["accuracy"]
    ok = codes == [0, 0, 0, 0] and acc >= 0.95
    return ok, f"exit codes {codes}, toy accuracy {acc:.3f} (need >= 0.95)"


CHECKS = [
    ("guidance reduction identities", "reduction"),
    ("forward-pass accounting", "passes"),
    ("tilted-moment sampling oracle", "tilted"),
    ("analytic score vs finite differences", "score"),
    ("negative-sampling chi-square", "negatives"),
    ("similarity enumeration fixture", "similarity"),
    ("weighted loss and gradient", "loss"),
    ("batch composition", "batches"),
    ("numba/numpy kernel parity", "kernels"),
    ("end-to-end toy pipeline", "pipeline"),
]


def run_checks(mutate=None, only=None):
    """Run the suite; returns a list of :class:`CheckResult`."""
    dual = MUTANTS[mutate]
    funcs = {
        "reduction": lambda: check_reduction(dual),
        "passes": check_pass_counts,
        "tilted": lambda: check_tilted(dual),
        "score": check_score,
        "negatives": check_negative_sampling,
        "similarity": check_similarity,
        "loss": check_loss_gradient,
        "batches": check_batches,
        "kernels": check_kernels,
        "pipeline": check_pipeline,
    }
    results = []
    for title, key in CHECKS:
        if only is not None and key not in only:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = funcs[key]()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(title, bool(ok), detail, time.perf_counter() - t0))
    return results
