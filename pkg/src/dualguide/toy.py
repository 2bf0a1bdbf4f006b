"""Desk-scale Gaussian "image" datasets for the end-to-end pipeline.

Each class is an isotropic Gaussian over small rasters. The generator writes
the training pool, a held-out test pool, the pinned shots file, the embedding
file (flattened shots) and a ready-to-run config.
"""

from pathlib import Path

import numpy as np
import yaml

from .generation import FewShotDataset
from .similarity import embed_images, write_embeddings

__all__ = ["class_means", "make_toy_dataset"]


def class_means(n_classes, image_shape, separation, seed):
    """Random sign patterns scaled to ``separation`` per pixel."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC1A55,)))
    return separation * rng.choice([-1.0, 1.0], size=(n_classes,) + tuple(image_shape))


def _write_split(root, names, means, n_per_class, noise_std, rng):
    for name, mean in zip(names, means):
        d = Path(root) / name
        d.mkdir(parents=True, exist_ok=True)
        for k in range(n_per_class):
            np.save(d / f"{k:04d}.npy", mean + noise_std * rng.standard_normal(mean.shape))


def make_toy_dataset(
    out,
    n_classes=2,
    n_train=32,
    n_test=100,
    n_shots=8,
    image_shape=(8, 8),
    separation=1.0,
    noise_std=1.0,
    seed=0,
    n_synth_per_class=50,
):
    """Write a toy dataset under ``out`` and return the config path."""
    out = Path(out)
    names = [f"class_{c}" for c in range(n_classes)]
    means = class_means(n_classes, image_shape, separation, seed)
    rng = np.random.default_rng(seed)
    _write_split(out / "train", names, means, n_train, noise_std, rng)
    _write_split(out / "test", names, means, n_test, noise_std, rng)

    ds = FewShotDataset.select(out / "train", n_shots, seed, names)
    ds.write_shots(out / "train" / "shots.txt")
    table = embed_images([ds.images(c) for c in range(n_classes)], np.ravel, names)
    write_embeddings(out / "embeddings.bin", table)

    config = {
        "seed": seed,
        "dataset": {"root": "train", "n_shots": n_shots, "shots_file": "train/shots.txt"},
        "similarity": {"embedding_file": "embeddings.bin", "output": "out/similarity.json"},
        "generation": {
            "n_synth_per_class": n_synth_per_class,
            "weights": {"w_text": 2.0, "w_im_pos": 1.5, "w_im_neg": 0.5},
            "steps": 50,
            "backend": "toy",
            "toy": {"noise_var": float(noise_std**2)},
            "augmentation": {"enabled": True, "crop_scale_range": [0.7, 1.0], "rotation_degrees": 15.0},
            "output_dir": "out/synthetic",
        },
        "training": {
            "learning_rate": 0.01,
            "batch_size": 16,
            "epochs": 20,
            "output_dir": "out/train",
        },
        "evaluation": {"root": "test", "output": "out/eval.json"},
    }
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path
