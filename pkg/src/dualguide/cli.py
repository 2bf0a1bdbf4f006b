"""Command-line entry point.

Exit status: 0 success, 1 property or partial failure, 2 input error,
3 environment or backend error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backends import NoiseSchedule, load_backend
from .classifier import (
    LinearHead,
    LowRankAdapterHead,
    Pool,
    TrainConfig,
    evaluate,
    load_model,
    train,
)
from .config import PipelineConfig, load_config
from .errors import (
    BackendUnavailableError,
    DualGuideError,
    InvalidConfigError,
    InvalidInputError,
    TrainingDivergedError,
)
from .generation import (
    AugmentationConfig,
    FewShotDataset,
    GenerationManifest,
    build_plan,
    load_image,
    make_prompt,
    prompt_templates,
    run,
)
from .guidance import GuidanceWeights
from .similarity import ClassSimilarityMatrix, class_similarity_matrix, read_embeddings

EXIT_OK, EXIT_FAILURE, EXIT_INPUT, EXIT_BACKEND = 0, 1, 2, 3


class _Out:
    quiet = False

    def __call__(self, *args):
        if not self.quiet:
            print(*args)


say = _Out()


def err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _require(path, what):
    if path is None or not Path(path).exists():
        raise InvalidInputError(f"{what} not found: {path}")


def load_dataset(cfg: PipelineConfig) -> FewShotDataset:
    ds = cfg.dataset
    _require(ds.root, "dataset root")
    if ds.shots_file is not None:
        _require(ds.shots_file, "shots file")
        return FewShotDataset.from_shots_file(ds.root, ds.shots_file, ds.classes, ds.n_shots)
    return FewShotDataset.select(ds.root, ds.n_shots, cfg.seed, ds.classes)


def load_labeled_folder(root, classes) -> Pool:
    """Every image under ``root/<class>/`` as flattened features."""
    inputs, targets = [], []
    for c, name in enumerate(classes):
        for fname in FewShotDataset.class_files(root, name):
            inputs.append(np.ravel(load_image(Path(root) / name / fname)))
            targets.append(c)
    if not inputs:
        raise InvalidInputError(f"no images under {root}")
    return Pool(np.stack(inputs), np.array(targets))


def schedule_of(cfg: PipelineConfig):
    g = cfg.generation
    return NoiseSchedule.linear(g.num_train_steps, g.steps, g.alpha_bar_min)


def template_of(cfg: PipelineConfig):
    g = cfg.generation
    if g.template is not None:
        return g.template
    table = prompt_templates()
    if g.template_key not in table:
        raise InvalidConfigError(f"unknown template_key {g.template_key!r}; have {sorted(table)}")
    return table[g.template_key]


# ---------------------------------------------------------------------------
# commands


def cmd_similarity(cfg: PipelineConfig, dry_run=False):
    s = cfg.similarity
    _require(s.embedding_file, "embedding file")
    table = read_embeddings(s.embedding_file, s.class_names_file)
    matrix = class_similarity_matrix(table, s.temperature)
    say(f"{matrix.n_classes} classes from {table.vectors.shape[0]} embeddings")
    for a, b, v in matrix.top_pairs(3):
        say(f"  {a} ~ {b}: {v:.4f}")
    if not dry_run:
        s.output.parent.mkdir(parents=True, exist_ok=True)
        matrix.save(s.output)
        say(f"wrote {s.output}")
    return EXIT_OK


def make_backend(cfg: PipelineConfig, dataset: FewShotDataset, template: str):
    g = cfg.generation
    if g.backend == "toy":
        shots = [dataset.images(c) for c in range(dataset.n_classes)]
        prototypes = {
            make_prompt(name, template): np.mean(shots[c], axis=0)
            for c, name in enumerate(dataset.classes)
        }
        return load_backend("toy", prototypes=prototypes, image_shape=shots[0][0].shape, noise_var=g.toy.noise_var)
    if g.backend == "external":
        return load_backend("external", config=g.external)
    return load_backend(g.backend)


def cmd_generate(cfg: PipelineConfig, dry_run=False, workers=None):
    g = cfg.generation
    dataset = load_dataset(cfg)
    _require(cfg.similarity.output, "similarity artifact (run `similarity` first)")
    matrix = ClassSimilarityMatrix.load(cfg.similarity.output)
    weights = GuidanceWeights(g.weights.w_text, g.weights.w_im_pos, g.weights.w_im_neg)
    template = template_of(cfg)
    plan = build_plan(dataset, matrix, g.n_synth_per_class, weights, cfg.seed, template)
    if dry_run:
        for item in plan:
            say(
                f"{dataset.classes[item.target_class]}[{item.index}] +{item.positive_image} "
                f"-{item.negative_image} seed={item.seed} prompt={item.prompt!r}"
            )
        say(f"{len(plan)} items planned (dry run, nothing written)")
        return EXIT_OK
    backend = make_backend(cfg, dataset, template)
    aug = AugmentationConfig(
        tuple(g.augmentation.crop_scale_range), g.augmentation.rotation_degrees, g.augmentation.enabled
    )
    manifest = run(
        plan,
        backend,
        schedule_of(cfg),
        g.output_dir,
        dataset,
        aug,
        workers=workers or cfg.workers,
        manifest_path=g.manifest_path,
    )
    summary = manifest.summary()
    say(f"generated {summary['total'] - summary['failed']}/{summary['total']} items -> {g.output_dir}")
    for r in manifest.failures:
        say(f"  failed {r.target_name}[{r.index}]: {r.error}")
    return EXIT_OK if not manifest.failures else EXIT_FAILURE


def synthetic_pool(manifest: GenerationManifest, out_dir, classes) -> Pool:
    bad = sorted(
        {r.target_name for r in manifest.records if r.target_name not in classes}
        | {r.target_name for r in manifest.records
           if r.target_name in classes and classes.index(r.target_name) != r.target_class}
    )
    if bad:
        raise InvalidInputError(f"manifest classes do not match dataset: {bad}")
    ok = [r for r in manifest.records if r.error is None]
    if not ok:
        raise InvalidInputError("manifest has no successful records")
    inputs = np.stack([np.ravel(np.load(Path(out_dir) / r.output)) for r in ok])
    return Pool(inputs, np.array([r.target_class for r in ok]))


def make_model(kind, n_features, n_classes, rank, seed):
    if kind == "lowrank":
        return LowRankAdapterHead(n_features, n_classes, rank, seed=seed)
    return LinearHead(n_features, n_classes)


def cmd_train(cfg: PipelineConfig, dry_run=False):
    t = cfg.training
    if t.learning_rate is None:
        raise InvalidConfigError("training.learning_rate must be set (no default is assumed)")
    dataset = load_dataset(cfg)
    _require(cfg.generation.manifest_path, "manifest")
    manifest = GenerationManifest.load(cfg.generation.manifest_path)
    synth = synthetic_pool(manifest, cfg.generation.output_dir, dataset.classes)
    real_x, real_y = [], []
    for c in range(dataset.n_classes):
        for img in dataset.images(c):
            real_x.append(np.ravel(img))
            real_y.append(c)
    real = Pool(np.stack(real_x), np.array(real_y))
    val = None
    if t.val_root is not None:
        _require(t.val_root, "validation root")
        val = load_labeled_folder(t.val_root, dataset.classes)
    config = TrainConfig(
        learning_rate=t.learning_rate,
        lambda_weight=t.lambda_weight,
        batch_size=t.batch_size,
        epochs=t.epochs,
        adapter_rank=t.adapter_rank,
        weight_decay=t.weight_decay,
        loss_reduction=t.loss_reduction,
        val_fraction=t.val_fraction,
        steps_per_epoch=t.steps_per_epoch,
        real_only=t.real_only,
    )
    say(f"real {len(real)}, synthetic {len(synth)}, classes {dataset.n_classes}")
    if dry_run:
        return EXIT_OK
    model = make_model(t.model, real.inputs.shape[1], dataset.n_classes, t.adapter_rank, cfg.seed)
    report = train(model, real, synth, config, cfg.seed, val)
    t.output_dir.mkdir(parents=True, exist_ok=True)
    ckpt = t.output_dir / "model.npz"
    model.save(ckpt)
    report.checkpoint = str(ckpt)
    report.notes.append(f"classes: {dataset.classes}")
    report.save(t.output_dir / "report.json")
    for rec in report.history:
        acc = "n/a" if rec.val_accuracy is None else f"{rec.val_accuracy:.4f}"
        say(f"epoch {rec.epoch:3d} loss {rec.loss:.4f} val_acc {acc}")
    say(f"wrote {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, dry_run=False):
    e = cfg.evaluation
    if e.root is None:
        raise InvalidConfigError("evaluation.root must be set")
    _require(e.root, "evaluation root")
    ckpt = cfg.training.output_dir / "model.npz"
    _require(ckpt, "model checkpoint (run `train` first)")
    dataset = load_dataset(cfg)
    test = load_labeled_folder(e.root, dataset.classes)
    acc = evaluate(load_model(ckpt), test)
    print(f"top-1 accuracy: {acc:.4f} ({len(test)} examples)")
    if not dry_run:
        e.output.parent.mkdir(parents=True, exist_ok=True)
        e.output.write_text(json.dumps({"accuracy": acc, "n": len(test), "checkpoint": str(ckpt)}, indent=1) + "\n")
    return EXIT_OK


def cmd_verify(mutate=None, only=None):
    from .verify import run_checks

    results = run_checks(mutate, only)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_FAILURE
    print("all checks passed")
    return EXIT_OK


def cmd_toy(out, **kwargs):
    from .toy import make_toy_dataset

    path = make_toy_dataset(out, **kwargs)
    print(f"wrote toy dataset and {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="pipeline YAML config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override a config key, e.g. training.epochs=5")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="dualguide", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("similarity", parents=[common], help="build the class similarity artifact")
    sub.add_parser("generate", parents=[common], help="generate synthetic images and manifest")
    sub.add_parser("train", parents=[common], help="train the classifier on real + synthetic")
    sub.add_parser("eval", parents=[common], help="report top-1 accuracy on the evaluation set")
    v = sub.add_parser("verify", parents=[common], help="run the oracle suite")
    v.add_argument("--mutate", choices=["negative-sign"], default=None,
                   help="run against a deliberately broken combinator")
    v.add_argument("--only", nargs="+", default=None, help="subset of check keys")
    t = sub.add_parser("toy", parents=[common], help="write a toy Gaussian dataset and config")
    t.add_argument("out", type=Path)
    t.add_argument("--classes", type=int, default=2)
    t.add_argument("--shots", type=int, default=8)
    t.add_argument("--synth", type=int, default=50)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    say.quiet = getattr(args, "quiet", False)
    dry_run = getattr(args, "dry_run", False)
    try:
        if args.command == "verify":
            return cmd_verify(args.mutate, args.only)
        if args.command == "toy":
            return cmd_toy(args.out, n_classes=args.classes, n_shots=args.shots,
                           n_synth_per_class=args.synth, seed=getattr(args, "seed", 0))
        if not hasattr(args, "config"):
            raise InvalidConfigError("--config is required")
        overrides = list(getattr(args, "set", []))
        if hasattr(args, "seed"):
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if args.command == "similarity":
            return cmd_similarity(cfg, dry_run)
        if args.command == "generate":
            return cmd_generate(cfg, dry_run, getattr(args, "workers", None))
        if args.command == "train":
            return cmd_train(cfg, dry_run)
        if args.command == "eval":
            return cmd_eval(cfg, dry_run)
    except BackendUnavailableError as exc:
        err(exc)
        return EXIT_BACKEND
    except TrainingDivergedError as exc:
        err(exc)
        return EXIT_FAILURE
    except (DualGuideError, OSError, ValueError, KeyError) as exc:
        err(exc)
        return EXIT_INPUT
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
