"""Class similarity from few-shot embeddings and negative-class sampling.

The class score between classes i and j is the mean cosine similarity over
every pair of few-shot embeddings (a in i, b in j). A negative class for an
anchor is drawn from a softmax over the anchor's row with the anchor removed
before normalisation.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax

from . import kernels
from .errors import EmbeddingFormatError, InvalidInputError, NoNegativeClassError

__all__ = [
    "EmbeddingTable",
    "ClassSimilarityMatrix",
    "NegativeSamplingDistribution",
    "class_similarity_matrix",
    "negative_distribution",
    "sample_negative_class",
    "read_embeddings",
    "write_embeddings",
    "embed_images",
    "clip_image_encoder",
]


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = [str(c) for c in self.class_names]
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise InvalidInputError("vectors must be a non-empty 2-D array")
        if self.labels.shape != (self.vectors.shape[0],):
            raise InvalidInputError("one label per vector required")
        n = len(self.class_names)
        if self.labels.min() < 0 or self.labels.max() >= n:
            raise InvalidInputError("label out of range of class_names")
        missing = sorted(set(range(n)) - set(self.labels.tolist()))
        if missing:
            names = [self.class_names[i] for i in missing]
            raise InvalidInputError(f"classes without embeddings: {names}")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("non-finite embedding")
        zero = np.flatnonzero(~np.any(self.vectors != 0, axis=1))
        if zero.size:
            raise InvalidInputError(f"zero embedding vector at rows {zero.tolist()}")

    @property
    def n_classes(self):
        return len(self.class_names)


@dataclass
class ClassSimilarityMatrix:
    sim: np.ndarray
    class_names: list
    temperature: float = 1.0

    def __post_init__(self):
        self.sim = np.asarray(self.sim, dtype=np.float64)
        if not self.temperature > 0:
            raise InvalidInputError("temperature must be positive")
        n = len(self.class_names)
        if self.sim.shape != (n, n):
            raise InvalidInputError(f"sim must be {n}x{n}, got {self.sim.shape}")

    @property
    def n_classes(self):
        return len(self.class_names)

    def top_pairs(self, k=3):
        """The ``k`` most similar distinct class pairs, highest first."""
        iu, ju = np.triu_indices(self.n_classes, k=1)
        order = np.argsort(-self.sim[iu, ju], kind="stable")[:k]
        return [
            (self.class_names[iu[o]], self.class_names[ju[o]], float(self.sim[iu[o], ju[o]]))
            for o in order
        ]

    def to_json(self) -> str:
        payload = {
            "format": "dualguide.similarity",
            "version": 1,
            "class_names": self.class_names,
            "temperature": self.temperature,
            "sim": self.sim.tolist(),
        }
        return json.dumps(payload, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str):
        payload = json.loads(text)
        if payload.get("format") != "dualguide.similarity":
            raise InvalidInputError("not a similarity artifact")
        return cls(np.array(payload["sim"]), payload["class_names"], payload["temperature"])

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


@dataclass
class NegativeSamplingDistribution:
    probs: np.ndarray
    anchor: int

    def cdf(self):
        cdf = np.cumsum(self.probs)
        # pin the tail to exactly 1 so trailing zero-probability classes
        # (possibly the anchor) can never be selected by rounding
        last = np.flatnonzero(self.probs > 0)[-1]
        cdf[last:] = 1.0
        return cdf


def class_similarity_matrix(table: EmbeddingTable, temperature: float = 1.0):
    sim = kernels.class_cosine_means(
        np.ascontiguousarray(table.vectors), table.labels, table.n_classes
    )
    return ClassSimilarityMatrix(sim, list(table.class_names), temperature)


def negative_distribution(matrix: ClassSimilarityMatrix, anchor: int):
    n = matrix.n_classes
    if n < 2:
        raise NoNegativeClassError()
    if not 0 <= anchor < n:
        raise InvalidInputError(f"anchor {anchor} out of range")
    others = np.array([j for j in range(n) if j != anchor])
    probs = np.zeros(n)
    probs[others] = softmax(matrix.sim[anchor, others] / matrix.temperature)
    return NegativeSamplingDistribution(probs, anchor)


def sample_negative_class(dist: NegativeSamplingDistribution, rng, size=None):
    """Draw class indices from ``dist`` by inverse CDF.

    ``rng`` is a :class:`numpy.random.Generator` or a seed. Returns an int, or
    an int64 array when ``size`` is given.
    """
    rng = np.random.default_rng(rng)
    u = rng.random(1 if size is None else size)
    idx = kernels.categorical_draws(dist.cdf(), np.ascontiguousarray(u))
    return int(idx[0]) if size is None else idx


# ---------------------------------------------------------------------------
# embedding file: <u32 dim><u32 count> then count x (<i32 class><f32 x dim>),
# little-endian; class names in a sidecar text file, one per line


def _row_dtype(dim):
    return np.dtype([("label", "<i4"), ("vec", "<f4", (dim,))])


def default_names_path(path):
    path = Path(path)
    return path.with_name(path.name + ".classes")


def write_embeddings(path, table: EmbeddingTable, names_path=None):
    dim = table.vectors.shape[1]
    rows = np.empty(table.vectors.shape[0], dtype=_row_dtype(dim))
    rows["label"] = table.labels
    rows["vec"] = table.vectors
    with open(path, "wb") as f:
        f.write(np.array([dim, rows.size], dtype="<u4").tobytes())
        f.write(rows.tobytes())
    names_path = default_names_path(path) if names_path is None else names_path
    Path(names_path).write_text("".join(f"{name}\n" for name in table.class_names))


def read_embeddings(path, names_path=None) -> EmbeddingTable:
    path = Path(path)
    names_path = default_names_path(path) if names_path is None else Path(names_path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise EmbeddingFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    dim, count = (int(v) for v in np.frombuffer(raw[:8], dtype="<u4"))
    if dim == 0:
        raise EmbeddingFormatError(f"{path}: dimension is 0")
    dtype = _row_dtype(dim)
    expected = 8 + count * dtype.itemsize
    if len(raw) != expected:
        raise EmbeddingFormatError(
            f"{path}: expected {expected} bytes for {count} rows of dim {dim}, got {len(raw)}"
        )
    rows = np.frombuffer(raw[8:], dtype=dtype)
    if not names_path.exists():
        raise EmbeddingFormatError(f"missing class-name sidecar {names_path}")
    names = names_path.read_text().splitlines()
    try:
        return EmbeddingTable(rows["vec"].astype(np.float64), rows["label"], names)
    except InvalidInputError as exc:
        raise EmbeddingFormatError(f"{path}: {exc}") from exc


def embed_images(
    images_by_class: Sequence[Sequence], encoder: Callable, class_names: Sequence[str]
) -> EmbeddingTable:
    """Encode few-shot images class by class into an :class:`EmbeddingTable`."""
    vectors, labels = [], []
    for label, images in enumerate(images_by_class):
        for img in images:
            vectors.append(np.asarray(encoder(img), dtype=np.float64).reshape(-1))
            labels.append(label)
    return EmbeddingTable(np.stack(vectors), np.array(labels), list(class_names))


def clip_image_encoder(model_id: str = "openai/clip-vit-base-patch16", device: str = "cpu"):
    """Image-embedding callable backed by a CLIP vision tower (needs transformers)."""
    import torch
    from transformers import CLIPModel, CLIPProcessor

    model = CLIPModel.from_pretrained(model_id).to(device).eval()
    processor = CLIPProcessor.from_pretrained(model_id)

    @torch.no_grad()
    def encode(image):
        inputs = processor(images=image, return_tensors="pt").to(device)
        return model.get_image_features(**inputs)[0].cpu().numpy()

    return encode
