"""Synthetic data generation: plan, augment, guide, record.

For every target class and every requested image, a positive image is drawn
from the target's shots, a negative class is drawn from the similarity
softmax, and a negative image is drawn from that class's shots. Both images
are augmented independently and condition the guided sampler alongside the
class prompt. Each output gets one manifest record.
"""

import datetime
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from skimage.transform import resize, rotate

from .backends import DenoiserBackend, NoiseSchedule, sample
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidTemplateError,
    NoNegativeClassError,
)
from .guidance import ConditionSet, GuidanceWeights
from .similarity import ClassSimilarityMatrix, negative_distribution, sample_negative_class

__all__ = [
    "FewShotDataset",
    "GenerationPlanItem",
    "GenerationManifestRecord",
    "GenerationManifest",
    "AugmentationConfig",
    "build_plan",
    "make_prompt",
    "augment",
    "run",
    "load_image",
    "prompt_templates",
    "MANIFEST_SCHEMA",
]

MANIFEST_SCHEMA = {"schema": "dualguide.manifest", "version": 1}
TIMESTAMP_FIELDS = ("started_at", "duration_s")
IMAGE_SUFFIXES = (".npy", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset


@dataclass
class FewShotDataset:
    """Few-shot subset of ``root/<class_name>/<image>``.

    ``shots[c]`` lists image paths relative to ``root``.
    """

    root: Path
    classes: List[str]
    shots: List[List[str]]

    def __post_init__(self):
        self.root = Path(self.root)
        if len(self.classes) != len(self.shots):
            raise InvalidInputError("one shot list per class required")
        sizes = {len(s) for s in self.shots}
        if len(sizes) != 1 or 0 in sizes:
            raise InvalidInputError(f"every class needs the same nonzero shot count, got {sizes}")

    @property
    def n_shots(self):
        return len(self.shots[0])

    @property
    def n_classes(self):
        return len(self.classes)

    def load(self, rel) -> np.ndarray:
        return load_image(self.root / rel)

    def images(self, c):
        return [self.load(rel) for rel in self.shots[c]]

    @staticmethod
    def class_files(root, name):
        return sorted(
            p.name for p in (Path(root) / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )

    @classmethod
    def select(cls, root, n_shots, seed, classes=None):
        """Pick ``n_shots`` per class from a seeded per-class permutation.

        The permutation depends only on ``seed`` and the class's file list, so
        the 4-shot subset is a prefix of the 8-shot subset and so on.
        """
        root = Path(root)
        if classes is None:
            classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        shots = []
        for c, name in enumerate(classes):
            files = cls.class_files(root, name)
            if len(files) < n_shots:
                raise InvalidInputError(f"class {name!r} has {len(files)} images, need {n_shots}")
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))
            order = rng.permutation(len(files))[:n_shots]
            shots.append([f"{name}/{files[k]}" for k in order])
        return cls(root, list(classes), shots)

    def write_shots(self, path):
        Path(path).write_text("".join(f"{rel}\n" for s in self.shots for rel in s))

    @classmethod
    def from_shots_file(cls, root, shots_file, classes=None, n_shots=None):
        """Load a pinned subset: one ``class_name/file`` per line."""
        per_class = {}
        for line in Path(shots_file).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            name = line.split("/", 1)[0]
            per_class.setdefault(name, []).append(line)
        if classes is None:
            classes = list(per_class)
        missing = [c for c in classes if c not in per_class]
        if missing:
            raise InvalidInputError(f"shots file lacks classes {missing}")
        shots = [per_class[c] if n_shots is None else per_class[c][:n_shots] for c in classes]
        return cls(root, list(classes), shots)


# ---------------------------------------------------------------------------
# prompts


def prompt_templates():
    text = resources.files("dualguide").joinpath("data/templates.json").read_text()
    table = json.loads(text)
    table.pop("_comment", None)
    return table


def make_prompt(class_name: str, template: str = "A photo of a {}") -> str:
    if template.count("{}") != 1:
        raise InvalidTemplateError(f"template needs exactly one '{{}}': {template!r}")
    return template.replace("{}", class_name.replace("_", " "))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale_range: Tuple[float, float] = (0.7, 1.0)
    rotation_degrees: float = 15.0
    enabled: bool = True

    def __post_init__(self):
        lo, hi = (float(v) for v in self.crop_scale_range)
        if not 0 < lo <= hi <= 1:
            raise InvalidConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if not self.rotation_degrees >= 0:
            raise InvalidConfigError("rotation_degrees must be >= 0")
        object.__setattr__(self, "crop_scale_range", (lo, hi))


def augment(image, cfg: AugmentationConfig, rng, out_shape=None):
    """Random crop then random rotation, resized to ``out_shape``.

    Returns ``(image, params)`` where ``params`` records what was applied.
    The crop keeps the image aspect ratio and covers an area fraction drawn
    uniformly from ``cfg.crop_scale_range``.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise InvalidInputError("empty image")
    if not cfg.enabled:
        return image, {"enabled": False}
    rng = np.random.default_rng(rng)
    out_shape = tuple(image.shape) if out_shape is None else tuple(out_shape)
    H, W = image.shape[:2]
    lo, hi = cfg.crop_scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    side = np.sqrt(scale)
    h, w = int(round(H * side)), int(round(W * side))
    if h < 1 or w < 1:
        raise InvalidConfigError(f"crop of area fraction {scale:.3g} is empty for {H}x{W} image")
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    r = cfg.rotation_degrees
    angle = float(rng.uniform(-r, r)) if r > 0 else 0.0

    out = image[top : top + h, left : left + w]
    if angle != 0.0:
        out = rotate(out, angle, order=1, mode="reflect", preserve_range=True)
    if out.shape != out_shape:
        out = resize(out, out_shape, order=1, mode="reflect", anti_aliasing=False, preserve_range=True)
    params = {
        "enabled": True,
        "crop_scale": scale,
        "crop_box": [top, left, h, w],
        "angle": angle,
    }
    return out, params


# ---------------------------------------------------------------------------
# plan


@dataclass
class GenerationPlanItem:
    target_class: int
    index: int
    positive_image: str
    negative_class: int
    negative_image: str
    prompt: str
    weights: GuidanceWeights
    seed: int


def _item_streams(master_seed, c, i):
    # counter-style key (class, index): any item can be rebuilt alone
    plan_ss, gen_ss = np.random.SeedSequence(master_seed, spawn_key=(c, i)).spawn(2)
    return np.random.default_rng(plan_ss), int(gen_ss.generate_state(1, np.uint64)[0])


def build_plan(
    dataset: FewShotDataset,
    matrix: ClassSimilarityMatrix,
    n_synth_per_class: int,
    weights: GuidanceWeights,
    master_seed: int,
    template: str = "A photo of a {}",
) -> List[GenerationPlanItem]:
    if n_synth_per_class < 1:
        raise InvalidInputError("n_synth_per_class must be >= 1")
    if list(matrix.class_names) != list(dataset.classes):
        raise InvalidInputError("similarity matrix classes do not match dataset classes")
    if dataset.n_classes < 2:
        raise NoNegativeClassError()
    plan = []
    for c, name in enumerate(dataset.classes):
        dist = negative_distribution(matrix, c)
        prompt = make_prompt(name, template)
        for i in range(n_synth_per_class):
            rng, seed = _item_streams(master_seed, c, i)
            pos = dataset.shots[c][int(rng.integers(len(dataset.shots[c])))]
            neg_c = sample_negative_class(dist, rng)
            neg = dataset.shots[neg_c][int(rng.integers(len(dataset.shots[neg_c])))]
            plan.append(GenerationPlanItem(c, i, pos, neg_c, neg, prompt, weights, seed))
    return plan


# ---------------------------------------------------------------------------
# manifest


@dataclass
class GenerationManifestRecord:
    index: int
    target_class: int
    target_name: str
    positive_image: str
    negative_class: int
    negative_name: str
    negative_image: str
    prompt: str
    weights: dict
    seed: int
    output: Optional[str]
    schedule: dict
    augmentation: dict
    backend: str
    started_at: str = ""
    duration_s: float = 0.0
    error: Optional[str] = None

    def to_json(self, timestamps=True) -> str:
        d = asdict(self)
        if not timestamps:
            for k in TIMESTAMP_FIELDS:
                d.pop(k)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str):
        return cls(**json.loads(line))

    @property
    def synthetic_label(self):
        return self.target_class


@dataclass
class GenerationManifest:
    records: List[GenerationManifestRecord] = field(default_factory=list)

    @property
    def failures(self):
        return [r for r in self.records if r.error is not None]

    def summary(self):
        return {"total": len(self.records), "failed": len(self.failures)}

    def dumps(self, timestamps=True) -> str:
        lines = [json.dumps(MANIFEST_SCHEMA, sort_keys=True, separators=(",", ":"))]
        lines += [r.to_json(timestamps) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str):
        lines = text.splitlines()
        if not lines:
            raise InvalidInputError("empty manifest")
        header = json.loads(lines[0])
        if header.get("schema") != MANIFEST_SCHEMA["schema"]:
            raise InvalidInputError(f"unknown manifest header {header}")
        if header.get("version") != MANIFEST_SCHEMA["version"]:
            raise InvalidInputError(f"unsupported manifest version {header.get('version')}")
        return cls([GenerationManifestRecord.from_json(l) for l in lines[1:] if l.strip()])

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# run


def _run_item(item, backend, schedule, out_dir, dataset, aug_cfg, out_shape):
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.perf_counter()
    classes = dataset.classes
    rel = f"{classes[item.target_class]}/{item.index:05d}.npy"
    record = GenerationManifestRecord(
        index=item.index,
        target_class=item.target_class,
        target_name=classes[item.target_class],
        positive_image=item.positive_image,
        negative_class=item.negative_class,
        negative_name=classes[item.negative_class],
        negative_image=item.negative_image,
        prompt=item.prompt,
        weights=item.weights.to_dict(),
        seed=item.seed,
        output=None,
        schedule=schedule.describe(),
        augmentation={},
        backend=backend.name,
        started_at=started,
    )
    pos_ss, neg_ss, noise_ss = np.random.SeedSequence(item.seed).spawn(3)
    try:
        pos, pos_params = augment(dataset.load(item.positive_image), aug_cfg, pos_ss, out_shape)
        neg, neg_params = augment(dataset.load(item.negative_image), aug_cfg, neg_ss, out_shape)
        record.augmentation = {"positive": pos_params, "negative": neg_params}
        conditions = ConditionSet(item.prompt, pos, neg)
        x = sample(backend, conditions, item.weights, schedule, noise_ss)
        if out_shape is not None:
            x = x.reshape(out_shape)
        path = Path(out_dir) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, x)
        record.output = rel
    except Exception as exc:  # record-and-continue
        record.error = f"{type(exc).__name__}: {exc}"
    record.duration_s = time.perf_counter() - t0
    return record


def run(
    plan: Sequence[GenerationPlanItem],
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    out_dir,
    dataset: FewShotDataset,
    augmentation: AugmentationConfig = AugmentationConfig(),
    workers: int = 1,
    manifest_path=None,
) -> GenerationManifest:
    """Generate one output per plan item under ``out_dir/<class>/<index>.npy``.

    Item failures are recorded in the manifest and do not stop the run.
    Records keep plan order whatever ``workers`` is. If ``manifest_path`` is
    given, the manifest is written there (header plus one line per record).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_shape = getattr(backend, "image_shape", None)

    def job(item):
        return _run_item(item, backend, schedule, out_dir, dataset, augmentation, out_shape)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, plan))
    else:
        records = [job(item) for item in plan]
    manifest = GenerationManifest(records)
    if manifest_path is not None:
        manifest.save(manifest_path)
    return manifest
