"""Pipeline configuration: one YAML file drives every command.

Unknown keys are rejected. Relative paths resolve against the directory of
the config file. ``KEY=VALUE`` overrides (dotted keys, YAML values) apply
before validation.
"""

from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import InvalidConfigError

__all__ = ["PipelineConfig", "load_config", "apply_overrides"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    root: Path
    classes: Optional[List[str]] = None
    n_shots: int = Field(16, ge=1)
    shots_file: Optional[Path] = None


class SimilaritySection(_Strict):
    embedding_file: Path
    class_names_file: Optional[Path] = None
    temperature: float = Field(1.0, gt=0)
    output: Path = Path("out/similarity.json")


class WeightsSection(_Strict):
    w_text: float = Field(7.5, ge=0)
    w_im_pos: float = Field(1.0, ge=0)
    w_im_neg: float = Field(1.0, ge=0)


class AugmentationSection(_Strict):
    enabled: bool = True
    crop_scale_range: Tuple[float, float] = (0.7, 1.0)
    rotation_degrees: float = Field(15.0, ge=0)


class ToyBackendSection(_Strict):
    noise_var: float = Field(0.25, gt=0)


class ExternalBackendSection(_Strict):
    model_id: str = ""
    image_adapter_id: str = ""
    device: str = "cpu"
    null_text: Literal["empty_prompt", "null_embedding"] = "empty_prompt"
    image_absent: Literal["zero_embedding", "drop_adapter"] = "zero_embedding"


class GenerationSection(_Strict):
    n_synth_per_class: int = Field(200, ge=1)
    weights: WeightsSection = WeightsSection()
    steps: int = Field(50, ge=1)
    num_train_steps: int = Field(1000, ge=1)
    alpha_bar_min: float = Field(1e-8, gt=0, lt=1)
    template: Optional[str] = None
    template_key: str = "default"
    augmentation: AugmentationSection = AugmentationSection()
    backend: str = "toy"
    toy: ToyBackendSection = ToyBackendSection()
    external: ExternalBackendSection = ExternalBackendSection()
    output_dir: Path = Path("out/synthetic")
    manifest: Optional[Path] = None

    @property
    def manifest_path(self):
        return self.manifest if self.manifest is not None else self.output_dir / "manifest.jsonl"


class TrainingSection(_Strict):
    learning_rate: Optional[float] = Field(None, gt=0)
    lambda_weight: float = Field(0.8, ge=0, le=1)
    batch_size: int = Field(32, ge=2)
    epochs: int = Field(10, ge=0)
    adapter_rank: int = Field(16, ge=1)
    weight_decay: float = Field(0.01, ge=0)
    loss_reduction: Literal["sum", "mean"] = "sum"
    val_fraction: float = Field(0.1, ge=0, lt=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    real_only: bool = False
    model: Literal["linear", "lowrank"] = "linear"
    val_root: Optional[Path] = None
    output_dir: Path = Path("out/train")

    @field_validator("batch_size")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("batch_size must be even")
        return v


class EvaluationSection(_Strict):
    root: Optional[Path] = None
    output: Path = Path("out/eval.json")


class PipelineConfig(_Strict):
    seed: int = 0
    workers: int = Field(1, ge=1)
    dataset: DatasetSection
    similarity: SimilaritySection
    generation: GenerationSection = GenerationSection()
    training: TrainingSection = TrainingSection()
    evaluation: EvaluationSection = EvaluationSection()

    def resolve(self, base: Path):
        """Make every relative path absolute against ``base``."""

        def fix(section, *names):
            for name in names:
                value = getattr(section, name)
                if value is not None and not Path(value).is_absolute():
                    setattr(section, name, (base / value).resolve())

        fix(self.dataset, "root", "shots_file")
        fix(self.similarity, "embedding_file", "class_names_file", "output")
        fix(self.generation, "output_dir", "manifest")
        fix(self.training, "val_root", "output_dir")
        fix(self.evaluation, "root", "output")
        return self


def apply_overrides(raw: dict, overrides):
    for item in overrides or ():
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path, overrides=()) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"config {path} is not a mapping")
    raw = apply_overrides(raw, overrides)
    try:
        cfg = PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise InvalidConfigError(f"invalid config {path}:\n{exc}") from exc
    return cfg.resolve(path.parent.resolve())
