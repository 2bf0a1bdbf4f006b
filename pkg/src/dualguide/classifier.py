"""Few-shot classifier training on mixed real and synthetic data.

Every batch holds as many real as synthetic examples; real examples are
replicated when the real pool is smaller than half a batch. The loss is

    lambda * CE(real half) + (1 - lambda) * CE(synthetic half)

summed over each half by default (``loss_reduction="mean"`` averages instead).
Synthetic targets are the classes of the positive images that produced them.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidConfigError, InvalidInputError, TrainingDivergedError

__all__ = [
    "TrainConfig",
    "Pool",
    "TrainingBatch",
    "ClassifierModel",
    "LinearHead",
    "LowRankAdapterHead",
    "AdamW",
    "compose_batch",
    "epoch_batches",
    "cross_entropy",
    "weighted_loss",
    "weighted_loss_grad",
    "train",
    "evaluate",
    "sweep_learning_rate",
    "load_model",
]


@dataclass
class TrainConfig:
    """Training settings. ``learning_rate`` has no default on purpose."""

    learning_rate: float
    lambda_weight: float = 0.8
    batch_size: int = 32
    epochs: int = 10
    adapter_rank: int = 16
    weight_decay: float = 0.01
    loss_reduction: str = "sum"
    val_fraction: float = 0.1
    steps_per_epoch: Optional[int] = None
    real_only: bool = False

    def __post_init__(self):
        if not 0 <= self.lambda_weight <= 1:
            raise InvalidConfigError("lambda_weight must be in [0, 1]")
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidConfigError("batch_size must be even and >= 2")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be >= 0")
        if self.adapter_rank < 1:
            raise InvalidConfigError("adapter_rank must be >= 1")
        if self.loss_reduction not in ("sum", "mean"):
            raise InvalidConfigError("loss_reduction must be 'sum' or 'mean'")
        if not 0 <= self.val_fraction < 1:
            raise InvalidConfigError("val_fraction must be in [0, 1)")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise InvalidConfigError("steps_per_epoch must be >= 1")


@dataclass
class Pool:
    """Labelled examples: ``inputs[i]`` has class ``targets[i]``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise InvalidInputError("inputs and targets differ in length")

    def __len__(self):
        return self.targets.shape[0]

    def subset(self, idx):
        return Pool(self.inputs[idx], self.targets[idx])


@dataclass
class TrainingBatch:
    real_index: np.ndarray
    synth_index: np.ndarray
    real_inputs: np.ndarray
    real_targets: np.ndarray
    synth_inputs: np.ndarray
    synth_targets: np.ndarray


def _real_half(n_real, half, rng):
    if n_real >= half:
        return rng.choice(n_real, half, replace=False)
    # replicate every real example evenly, fill the remainder at random
    reps, rest = divmod(half, n_real)
    idx = np.concatenate([np.tile(np.arange(n_real), reps), rng.choice(n_real, rest, replace=False)])
    return rng.permutation(idx)


def _batch(real_pool, synth_pool, real_idx, synth_idx):
    return TrainingBatch(
        real_idx,
        synth_idx,
        real_pool.inputs[real_idx],
        real_pool.targets[real_idx],
        synth_pool.inputs[synth_idx] if synth_pool is not None else None,
        synth_pool.targets[synth_idx] if synth_pool is not None else None,
    )


def compose_batch(real_pool: Pool, synth_pool: Pool, batch_size: int, rng) -> TrainingBatch:
    """One batch: ``batch_size/2`` real and ``batch_size/2`` synthetic examples."""
    if batch_size < 2 or batch_size % 2:
        raise InvalidInputError("batch_size must be even and >= 2")
    if len(real_pool) == 0 or len(synth_pool) == 0:
        raise InvalidInputError("both pools must be nonempty")
    rng = np.random.default_rng(rng)
    half = batch_size // 2
    real_idx = _real_half(len(real_pool), half, rng)
    synth_idx = rng.choice(len(synth_pool), half, replace=len(synth_pool) < half)
    return _batch(real_pool, synth_pool, real_idx, synth_idx)


def epoch_batches(
    real_pool: Pool,
    synth_pool: Optional[Pool],
    batch_size: int,
    real_rng,
    synth_rng,
    n_batches: Optional[int] = None,
) -> Iterator[TrainingBatch]:
    """Batches for one epoch.

    The synthetic half walks a fresh permutation of the synthetic pool; the
    final batch is topped up with other synthetic examples so that every batch
    is exactly half real, half synthetic. Real and synthetic draws use separate
    generators so a real-only run sees the same real halves as a mixed run.
    With ``synth_pool=None`` only real halves are emitted.
    """
    if len(real_pool) == 0:
        raise InvalidInputError("real pool is empty")
    half = batch_size // 2
    if synth_pool is not None and len(synth_pool) == 0:
        raise InvalidInputError("synthetic pool is empty")
    n_ref = len(synth_pool) if synth_pool is not None else len(real_pool)
    if n_batches is None:
        n_batches = -(-n_ref // half)
    order = np.empty(0, dtype=np.int64)
    for b in range(n_batches):
        synth_idx = None
        if synth_pool is not None:
            while order.size < half:
                order = np.concatenate([order, synth_rng.permutation(len(synth_pool))])
            synth_idx, order = order[:half], order[half:]
            if np.unique(synth_idx).size < synth_idx.size:
                # pool smaller than half a batch or wrap-around duplicate
                synth_idx = _dedupe(synth_idx, len(synth_pool), synth_rng)
        real_idx = _real_half(len(real_pool), half, real_rng)
        yield _batch(real_pool, synth_pool, real_idx, synth_idx)


def _dedupe(idx, n, rng):
    if n < idx.size:
        return idx
    seen, out = set(), []
    for i in idx.tolist():
        if i not in seen:
            seen.add(i)
            out.append(i)
    spare = np.setdiff1d(np.arange(n), out)
    out.extend(rng.choice(spare, idx.size - len(out), replace=False).tolist())
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits, targets):
    """Per-example cross-entropy of integer ``targets`` under ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise InvalidInputError(
            f"logits {logits.shape} and targets {targets.shape} are not aligned"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise InvalidInputError("target outside logit dimension")
    return -log_softmax(logits, axis=1)[np.arange(targets.size), targets]


def _reduce(values, reduction):
    if values.size == 0:
        return 0.0
    return float(values.sum() if reduction == "sum" else values.mean())


def weighted_loss(
    real_logits, real_targets, synth_logits, synth_targets, lambda_weight, reduction="sum"
):
    if not 0 <= lambda_weight <= 1:
        raise InvalidInputError("lambda_weight must be in [0, 1]")
    real = _reduce(cross_entropy(real_logits, real_targets), reduction)
    synth = _reduce(cross_entropy(synth_logits, synth_targets), reduction)
    return lambda_weight * real + (1.0 - lambda_weight) * synth


def _ce_grad(logits, targets, scale):
    g = softmax(logits, axis=1)
    g[np.arange(targets.size), targets] -= 1.0
    return scale * g


def weighted_loss_grad(
    real_logits, real_targets, synth_logits, synth_targets, lambda_weight, reduction="sum"
):
    """``(loss, dloss/dreal_logits, dloss/dsynth_logits)``."""
    loss = weighted_loss(
        real_logits, real_targets, synth_logits, synth_targets, lambda_weight, reduction
    )
    n_r, n_s = len(real_targets), len(synth_targets)
    s_r = lambda_weight / (n_r if reduction == "mean" and n_r else 1)
    s_s = (1.0 - lambda_weight) / (n_s if reduction == "mean" and n_s else 1)
    return (
        loss,
        _ce_grad(np.asarray(real_logits, dtype=np.float64), np.asarray(real_targets), s_r),
        _ce_grad(np.asarray(synth_logits, dtype=np.float64), np.asarray(synth_targets), s_s),
    )


# ---------------------------------------------------------------------------
# models


class ClassifierModel:
    """Interface: logits from inputs plus gradients of the trainable parameters.

    ``parameters()`` returns only the trainable arrays; the optimiser updates
    them in place. A CLIP model with low-rank adapters on both encoders fits
    this interface by exposing the adapter weights as its parameters.
    """

    kind = "abstract"
    n_classes: int

    def forward(self, inputs) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def gradients(self, inputs, dlogits) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def state(self) -> Dict[str, np.ndarray]:
        return self.parameters()

    def save(self, path):
        np.savez(path, kind=np.array(self.kind), **self.state())


class LinearHead(ClassifierModel):
    kind = "linear"

    def __init__(self, n_features, n_classes):
        self.n_classes = n_classes
        self.weight = np.zeros((n_features, n_classes))
        self.bias = np.zeros(n_classes)

    def forward(self, inputs):
        return np.asarray(inputs, dtype=np.float64) @ self.weight + self.bias

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self, inputs, dlogits):
        inputs = np.asarray(inputs, dtype=np.float64)
        return {"weight": inputs.T @ dlogits, "bias": dlogits.sum(axis=0)}


class LowRankAdapterHead(ClassifierModel):
    """Frozen linear map plus a trainable rank-``r`` update ``down @ up``.

    ``up`` starts at zero so the initial logits equal the frozen map's.
    """

    kind = "lowrank"

    def __init__(self, n_features, n_classes, rank=16, base=None, seed=0):
        self.n_classes = n_classes
        self.base = np.zeros((n_features, n_classes)) if base is None else np.asarray(base, float)
        rng = np.random.default_rng(seed)
        self.down = rng.normal(0.0, 1.0 / np.sqrt(n_features), (n_features, rank))
        self.up = np.zeros((rank, n_classes))
        self.bias = np.zeros(n_classes)

    def forward(self, inputs):
        x = np.asarray(inputs, dtype=np.float64)
        return x @ self.base + (x @ self.down) @ self.up + self.bias

    def parameters(self):
        return {"down": self.down, "up": self.up, "bias": self.bias}

    def gradients(self, inputs, dlogits):
        x = np.asarray(inputs, dtype=np.float64)
        h = x @ self.down
        return {
            "down": x.T @ (dlogits @ self.up.T),
            "up": h.T @ dlogits,
            "bias": dlogits.sum(axis=0),
        }

    def state(self):
        return {"base": self.base, **self.parameters()}


def load_model(path) -> ClassifierModel:
    with np.load(path) as data:
        kind = str(data["kind"])
        if kind == "linear":
            model = LinearHead(*data["weight"].shape)
            model.weight[...] = data["weight"]
            model.bias[...] = data["bias"]
        elif kind == "lowrank":
            d, r = data["down"].shape
            model = LowRankAdapterHead(d, data["up"].shape[1], r, base=data["base"])
            model.down[...] = data["down"]
            model.up[...] = data["up"]
            model.bias[...] = data["bias"]
        else:
            raise InvalidInputError(f"unknown checkpoint kind {kind!r}")
    return model


class AdamW:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: Optional[float]
    wall_time_s: float


@dataclass
class TrainingReport:
    history: List[EpochRecord] = field(default_factory=list)
    validation_source: str = "none"
    config: dict = field(default_factory=dict)
    checkpoint: Optional[str] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def evaluate(model: ClassifierModel, inputs, targets=None) -> float:
    """Top-1 accuracy. Accepts ``(inputs, targets)`` or a :class:`Pool`."""
    if targets is None:
        inputs, targets = inputs.inputs, inputs.targets
    targets = np.asarray(targets)
    if targets.size == 0:
        raise InvalidInputError("evaluation set is empty")
    logits = model.forward(inputs)
    if logits.shape != (targets.size, model.n_classes):
        raise InvalidInputError(f"logits shape {logits.shape} does not match set")
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def train(
    model: ClassifierModel,
    real_pool: Pool,
    synth_pool: Optional[Pool],
    config: TrainConfig,
    seed: int,
    val_set: Optional[Pool] = None,
) -> TrainingReport:
    """Train ``model`` in place with AdamW on the weighted real/synthetic loss.

    Without ``val_set``, ``config.val_fraction`` of the synthetic pool is held
    out for validation and the report says so. ``config.real_only`` trains on
    real halves only (the synthetic pool still supplies validation data).
    """
    real_ss, synth_ss, split_ss = np.random.SeedSequence(seed).spawn(3)
    report = TrainingReport(config=asdict(config))
    if val_set is None and synth_pool is not None and config.val_fraction > 0:
        perm = np.random.default_rng(split_ss).permutation(len(synth_pool))
        n_val = int(round(config.val_fraction * len(synth_pool)))
        if 0 < n_val < len(synth_pool):
            val_set = synth_pool.subset(np.sort(perm[:n_val]))
            synth_pool = synth_pool.subset(np.sort(perm[n_val:]))
            report.validation_source = "synthetic-holdout"
            report.notes.append(
                "validation carved from synthetic data; no real validation set supplied"
            )
    elif val_set is not None:
        report.validation_source = "provided"

    real_rng = np.random.default_rng(real_ss)
    synth_rng = np.random.default_rng(synth_ss)
    opt = AdamW(model.parameters(), config.learning_rate, weight_decay=config.weight_decay)
    lam, red = config.lambda_weight, config.loss_reduction
    batch_pool = None if config.real_only else synth_pool

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        total = 0.0
        batches = epoch_batches(
            real_pool, batch_pool, config.batch_size, real_rng, synth_rng, config.steps_per_epoch
        )
        for step, batch in enumerate(batches):
            real_logits = model.forward(batch.real_inputs)
            if batch_pool is None:
                loss = lam * _reduce(cross_entropy(real_logits, batch.real_targets), red)
                d_real = _ce_grad(real_logits, batch.real_targets, lam / (len(batch.real_targets) if red == "mean" else 1))
                grads = model.gradients(batch.real_inputs, d_real)
            else:
                synth_logits = model.forward(batch.synth_inputs)
                loss, d_real, d_synth = weighted_loss_grad(
                    real_logits, batch.real_targets, synth_logits, batch.synth_targets, lam, red
                )
                g_real = model.gradients(batch.real_inputs, d_real)
                g_synth = model.gradients(batch.synth_inputs, d_synth)
                grads = {k: g_real[k] + g_synth[k] for k in g_real}
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch} step {step} "
                    f"(lr={config.learning_rate}, lambda={lam})"
                )
            opt.step(grads)
            total += loss
        val_acc = evaluate(model, val_set) if val_set is not None else None
        report.history.append(EpochRecord(epoch, total, val_acc, time.perf_counter() - t0))
    return report


def sweep_learning_rate(make_model, real_pool, synth_pool, config, rates, seed, val_set=None):
    """Train one fresh model per learning rate; return ``(best_rate, results)``.

    ``results`` maps each rate to its final validation accuracy. Intended for
    per-dataset tuning, since no learning rate is assumed.
    """
    results = {}
    for lr in rates:
        cfg = TrainConfig(**{**asdict(config), "learning_rate": lr})
        report = train(make_model(), real_pool, synth_pool, cfg, seed, val_set)
        results[lr] = report.history[-1].val_accuracy if report.history else None
    scored = [lr for lr in rates if results[lr] is not None]
    best = max(scored, key=lambda lr: results[lr]) if scored else None
    return best, results
