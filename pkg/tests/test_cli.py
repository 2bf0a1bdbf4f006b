import json

import numpy as np
import pytest
import yaml

import dualguide.generation as generation
from dualguide.cli import main
from dualguide.errors import BackendError
from dualguide.generation import GenerationManifest
from dualguide.similarity import EmbeddingTable, write_embeddings


def set_config(path, **updates):
    raw = yaml.safe_load(path.read_text())
    for dotted, value in updates.items():
        node = raw
        *head, last = dotted.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    path.write_text(yaml.safe_dump(raw))


# -- similarity -----------------------------------------------------------------


def orthogonal_config(tmp_path):
    vectors = np.repeat(np.eye(3), 2, axis=0)
    table = EmbeddingTable(vectors, np.repeat(np.arange(3), 2), ["a", "b", "c"])
    write_embeddings(tmp_path / "emb.bin", table)
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({
        "dataset": {"root": "train"},
        "similarity": {"embedding_file": "emb.bin", "output": "sim.json"},
    }))
    return cfg


def test_similarity_orthogonal_classes(tmp_path):
    cfg = orthogonal_config(tmp_path)
    assert main(["similarity", "--config", str(cfg), "--quiet"]) == 0
    art = json.loads((tmp_path / "sim.json").read_text())
    sim = np.array(art["sim"])
    np.testing.assert_allclose(sim, np.eye(3), atol=1e-12)
    assert art["class_names"] == ["a", "b", "c"]


def test_similarity_rerun_is_byte_identical(tmp_path):
    cfg = orthogonal_config(tmp_path)
    main(["similarity", "--config", str(cfg), "--quiet"])
    first = (tmp_path / "sim.json").read_bytes()
    main(["similarity", "--config", str(cfg), "--quiet"])
    assert (tmp_path / "sim.json").read_bytes() == first


def test_similarity_missing_embeddings(tmp_path, capsys):
    cfg = orthogonal_config(tmp_path)
    (tmp_path / "emb.bin").unlink()
    assert main(["similarity", "--config", str(cfg)]) == 2
    assert "embedding file not found" in capsys.readouterr().err
    assert not (tmp_path / "sim.json").exists()


def test_similarity_dry_run_writes_nothing(tmp_path):
    cfg = orthogonal_config(tmp_path)
    assert main(["similarity", "--config", str(cfg), "--dry-run", "--quiet"]) == 0
    assert not (tmp_path / "sim.json").exists()


# -- generate -------------------------------------------------------------------


@pytest.fixture
def small_toy(tmp_path):
    from dualguide.toy import make_toy_dataset

    cfg = make_toy_dataset(tmp_path, n_classes=2, n_train=10, n_test=20, n_shots=4, n_synth_per_class=3)
    assert main(["similarity", "--config", str(cfg), "--quiet"]) == 0
    return cfg


def test_generate_writes_outputs_and_manifest(small_toy):
    root = small_toy.parent
    assert main(["generate", "--config", str(small_toy), "--quiet"]) == 0
    outputs = sorted((root / "out/synthetic").glob("*/*.npy"))
    assert len(outputs) == 6
    lines = (root / "out/synthetic/manifest.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 6
    manifest = GenerationManifest.load(root / "out/synthetic/manifest.jsonl")
    assert all(r.error is None for r in manifest.records)
    for r in manifest.records:
        assert r.negative_class != r.target_class
        assert r.prompt == f"A photo of a {r.target_name.replace('_', ' ')}"


def test_generate_records_fault_and_continues(small_toy, monkeypatch):
    root = small_toy.parent
    real_sample, calls = generation.sample, []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 3:
            raise BackendError("injected fault", step=0)
        return real_sample(*args, **kwargs)

    monkeypatch.setattr(generation, "sample", flaky)
    assert main(["generate", "--config", str(small_toy), "--quiet"]) == 1
    assert len(list((root / "out/synthetic").glob("*/*.npy"))) == 5
    manifest = GenerationManifest.load(root / "out/synthetic/manifest.jsonl")
    assert len(manifest.records) == 6
    failed = manifest.failures
    assert len(failed) == 1 and "injected fault" in failed[0].error
    assert failed[0] is manifest.records[2] and failed[0].output is None


def test_generate_dry_run_writes_nothing(small_toy):
    root = small_toy.parent
    assert main(["generate", "--config", str(small_toy), "--dry-run", "--quiet"]) == 0
    assert not (root / "out/synthetic").exists()


def test_generate_external_backend_unavailable(small_toy):
    set_config(small_toy, **{"generation.backend": "external"})
    assert main(["generate", "--config", str(small_toy), "--quiet"]) == 3


def test_generate_requires_similarity_artifact(small_toy):
    (small_toy.parent / "out/similarity.json").unlink()
    assert main(["generate", "--config", str(small_toy), "--quiet"]) == 2


def test_generate_parallel_matches_serial(small_toy):
    root = small_toy.parent
    main(["generate", "--config", str(small_toy), "--quiet"])
    serial = {p.name + p.parent.name: np.load(p) for p in (root / "out/synthetic").glob("*/*.npy")}
    set_config(small_toy, **{"generation.output_dir": "out/par"})
    main(["generate", "--config", str(small_toy), "--quiet", "--workers", "3"])
    par = {p.name + p.parent.name: np.load(p) for p in (root / "out/par").glob("*/*.npy")}
    assert serial.keys() == par.keys()
    for k in serial:
        np.testing.assert_array_equal(serial[k], par[k])


# -- train / eval ---------------------------------------------------------------


def test_train_and_eval(small_toy, capsys):
    root = small_toy.parent
    assert main(["generate", "--config", str(small_toy), "--quiet"]) == 0
    assert main(["train", "--config", str(small_toy), "--quiet"]) == 0
    assert (root / "out/train/model.npz").exists()
    assert main(["eval", "--config", str(small_toy), "--quiet"]) == 0
    acc = json.loads((root / "out/eval.json").read_text())["accuracy"]
    assert acc >= 0.95
    assert "top-1 accuracy" in capsys.readouterr().out


def test_train_zero_epochs(small_toy):
    main(["generate", "--config", str(small_toy), "--quiet"])
    assert main(["train", "--config", str(small_toy), "--set", "training.epochs=0", "--quiet"]) == 0


def test_train_requires_learning_rate(small_toy, capsys):
    main(["generate", "--config", str(small_toy), "--quiet"])
    raw = yaml.safe_load(small_toy.read_text())
    del raw["training"]["learning_rate"]
    small_toy.write_text(yaml.safe_dump(raw))
    assert main(["train", "--config", str(small_toy), "--quiet"]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_class_mismatch(small_toy):
    root = small_toy.parent
    main(["generate", "--config", str(small_toy), "--quiet"])
    path = root / "out/synthetic/manifest.jsonl"
    path.write_text(path.read_text().replace('"class_1"', '"class_9"'))
    assert main(["train", "--config", str(small_toy), "--quiet"]) == 2


def test_train_odd_batch_size(small_toy):
    main(["generate", "--config", str(small_toy), "--quiet"])
    assert main(["train", "--config", str(small_toy), "--set", "training.batch_size=7", "--quiet"]) == 2


def test_unknown_config_key_exit_code(small_toy):
    assert main(["similarity", "--config", str(small_toy), "--set", "similarity.temp=2"]) == 2


# -- verify -----------------------------------------------------------------------


def test_verify_passes():
    assert main(["verify", "--only", "reduction", "passes", "similarity", "loss", "batches"]) == 0


def test_verify_mutant_fails(capsys):
    assert main(["verify", "--mutate", "negative-sign", "--only", "reduction", "tilted"]) == 1
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0].startswith("PASS  guidance reduction identities")
    assert lines[1].startswith("FAIL  tilted-moment sampling oracle")
    assert lines[-1] == "failed: tilted-moment sampling oracle"
