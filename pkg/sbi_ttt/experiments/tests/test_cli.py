import json
from collections import Counter

import numpy as np
import pytest

from sbi_ttt.errors import ArtifactError, ConfigError
from sbi_ttt.experiments.artifacts import ArtifactStore
from sbi_ttt.experiments.cli import (
    METHODS,
    cmd_evaluate,
    cmd_finetune,
    cmd_pretrain,
    cmd_reference,
    cmd_replay,
    cmd_report,
    main,
)
from sbi_ttt.experiments.config import build_config
from sbi_ttt.experiments.manifest import file_digest, load_manifest, save_manifest
from sbi_ttt.experiments.tasks import get_task
from sbi_ttt.models.flow import load_flow
from sbi_ttt.simulation.datasets import read_pairs, read_samples, write_samples
from sbi_ttt.simulation.types import ModelTag

TINY = {
    "sims_per_round": [60, 40],
    "batch_size": 20,
    "max_epochs": 3,
    "val_fraction": 0.0,
    "atoms": 5,
    "flow_layers": 2,
    "flow_hidden": [8],
    "embed_dim": 4,
    "embed_hidden": [8],
    "lora_rank": 2,
    "subspace_rank": 2,
    "snapshot_batches": 4,
    "snapshot_batch_size": 8,
    "mh_samples": 400,
    "mh_burn_in": 200,
    "mh_thin": 2,
    "mh_chains": 2,
    "require_converged": False,
    "eval_samples": 50,
}


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "artifacts")


@pytest.fixture
def config():
    return build_config(TINY)


@pytest.fixture
def pretrained(store, config):
    return cmd_pretrain(store, config, "bh_beta120", seed=0)


def test_pretrain_outputs(store, pretrained):
    out = store.run_dir("bh_beta120", "pretrain", 0)
    assert load_manifest(out) == pretrained
    flow = load_flow(pretrained.outputs["flow"])
    assert flow.standardizer is not None
    assert pretrained.dims == {"total": flow.store.size}
    thetas, series, seeds, rounds = read_pairs(pretrained.outputs["pairs"], ModelTag.BH, 1)
    assert thetas.shape == (100, 4)
    assert len(series) == 100
    assert len(set(seeds.tolist())) == 100
    assert np.bincount(rounds.astype(int)).tolist() == [60, 40]
    assert set(pretrained.metrics) >= {"round0.best_val_loss", "round1.best_val_loss"}
    assert pretrained.digests["flow"] == file_digest(pretrained.outputs["flow"])


def test_pretrain_is_deterministic_and_refuses_collisions(store, config, pretrained):
    with pytest.raises(ArtifactError, match="seed collision"):
        cmd_pretrain(store, config, "bh_beta120", seed=0)
    again = cmd_pretrain(store, config, "bh_beta120", seed=0, overwrite=True)
    assert again.digests == pretrained.digests
    assert again.metrics == pretrained.metrics
    other = cmd_pretrain(store, config, "bh_beta120", seed=1)
    assert other.digests["flow"] != pretrained.digests["flow"]


def test_finetune_reference_evaluate_report(store, config, pretrained, tmp_path):
    task = get_task("bh_beta60")
    tuned = cmd_finetune(store, config, task.name, "gs-pea", pretrained.outputs["flow"], seed=0)
    assert tuned.dims == {
        "trainable": 2,
        "total": pretrained.dims["total"],
        "subspace_rank": 2,
        "snapshot_batch_size": 8,
    }
    assert set(tuned.outputs) == {"subspace", "flow", "samples"}
    estimate = read_samples(tuned.outputs["samples"])
    assert estimate.shape == (50, 4)
    assert task.prior.contains(estimate).all()

    reference = cmd_reference(store, config, task.name, seed=0)
    pooled = read_samples(reference.outputs["samples"])
    assert pooled.shape == (50, 4)
    assert reference.metrics["n_pooled"] == 400

    evaluation = cmd_evaluate(
        store, config, tuned.outputs["samples"], reference.outputs["samples"]
    )
    assert (evaluation.task, evaluation.method) == ("bh_beta60", "gs-pea")
    assert evaluation.seeds == {"estimate": 0, "reference": 0}
    assert evaluation.metrics["wass"] > 0.0
    assert np.isfinite(evaluation.metrics["mmd_sq"])
    report_doc = json.loads(open(evaluation.outputs["report"], encoding="utf-8").read())
    assert report_doc["wass"] == evaluation.metrics["wass"]

    out = tmp_path / "report"
    rows = cmd_report([store.run_dir(task.name, "gs-pea", 0) / "evaluation"], out)
    assert [(r.task, r.method, r.n_seeds) for r in rows] == [("bh_beta60", "gs-pea", 1)]
    assert (out / "table.txt").exists()
    assert (out / "metrics.csv").read_text(encoding="utf-8").startswith("task,method,wass")
    assert (out / "hist-bh_beta60-gs-pea-seed-0.json").exists()
    assert (out / "hist-bh_beta60-reference-seed-0.json").exists()


@pytest.mark.parametrize("method", [m for m in METHODS if m != "gs-pea"])
def test_every_method_finetunes(store, config, pretrained, method):
    tuned = cmd_finetune(store, config, "bh_beta60", method, pretrained.outputs["flow"], seed=0)
    assert read_samples(tuned.outputs["samples"]).shape == (50, 4)
    total = pretrained.dims["total"]
    if method == "snpe":
        assert tuned.dims == {"trainable": 0, "total": total}
        assert tuned.digests["flow"] == pretrained.digests["flow"]
    elif method == "lora":
        assert 0 < tuned.dims["trainable"] < total
        assert "adapter" in tuned.outputs
    else:
        # full fine-tuning and gs-ttt both move every weight
        assert (tuned.dims["trainable"], tuned.dims["total"]) == (total, total)
        assert ("subspace" in tuned.outputs) == (method == "gs-ttt")
        assert ("snapshot_batch_size" in tuned.dims) == (method == "gs-ttt")


def test_finetune_rejects_unknown_method_and_mismatched_base(store, config, pretrained):
    with pytest.raises(ConfigError, match="unknown method"):
        cmd_finetune(store, config, "bh_beta60", "maf", pretrained.outputs["flow"], seed=0)
    with pytest.raises(ArtifactError):
        cmd_finetune(store, config, "mvgbmgtc", "ttt", pretrained.outputs["flow"], seed=0)


def test_reference_reuses_cache(store, config, tmp_path):
    first = cmd_reference(store, config, "bh_beta60", seed=0)
    second = cmd_reference(store, config, "bh_beta60", seed=0, out_dir=tmp_path / "again")
    assert second.digests == first.digests
    assert second.inputs["cache"] == first.inputs["cache"]


def test_evaluate_file_against_itself(store, config, tmp_path):
    path = tmp_path / "samples.csv"
    write_samples(path, np.random.default_rng(0).uniform(size=(40, 4)))
    with pytest.raises(ConfigError, match="--task"):
        cmd_evaluate(store, config, path, path)
    result = cmd_evaluate(store, config, path, path, task_name="bh_beta60", method="snpe")
    assert result.metrics["wass"] == pytest.approx(0.0, abs=1e-12)
    assert result.metrics["mmd_sq"] == pytest.approx(0.0, abs=1e-12)
    assert result.seeds == {}


def test_replay_reproduces_and_detects_drift(store, config, pretrained):
    tuned = cmd_finetune(store, config, "bh_beta60", "lora", pretrained.outputs["flow"], seed=0)
    out = store.run_dir("bh_beta60", "lora", 0)
    assert cmd_replay(out / "manifest.json")
    tampered = tuned.model_copy(update={"metrics": {**tuned.metrics, "sample_acceptance": 2.0}})
    save_manifest(tampered, out)
    assert not cmd_replay(out / "manifest.json")


def test_main_runs_commands_and_reports_errors(tmp_path):
    root = tmp_path / "root"
    overrides = [arg for k, v in TINY.items() for arg in ("--set", f"{k}={json.dumps(v)}")]
    args = ["--artifact-root", str(root), "--log-level", "WARNING", *overrides]
    assert main([*args, "pretrain", "bh_beta120", "--seed", "3"]) == 0
    manifest = load_manifest(root / "runs/bh_beta120/pretrain/seed-3")
    assert manifest.config["sims_per_round"] == [60, 40]
    assert main([*args, "pretrain", "bh_beta120", "--seed", "3"]) == 1
    assert main([*args, "pretrain", "bh_beta30"]) == 1
    assert main(["--artifact-root", str(root), "--set", "lr=fast", "pretrain", "mvgbm"]) == 1
    assert main(["--artifact-root", str(root), "replay", str(root / "runs")]) == 1


# (better, worse) WASS comparisons that must hold on at least two of three seeds
ORDERINGS = {
    "bh_beta60": [("ttt", "snpe")] + [("gs-pea", m) for m in METHODS if m != "gs-pea"],
    "bh_beta60gtc": [("ttt", "lora"), ("gs-ttt", "lora"), ("gs-pea", "lora")],
    "mvgbmgtc": [("ttt", "snpe")],
}


@pytest.mark.slow
@pytest.mark.parametrize("task_name", sorted(ORDERINGS))
def test_method_ordering_at_full_scale(tmp_path, task_name):
    store = ArtifactStore(tmp_path)
    config = build_config({})
    task = get_task(task_name)
    methods = sorted({m for pair in ORDERINGS[task_name] for m in pair})
    wins = Counter()
    for seed in range(3):
        base = cmd_pretrain(store, config, task.pretrain_source, seed)
        reference = cmd_reference(store, config, task.name, seed)
        wass = {}
        for method in methods:
            tuned = cmd_finetune(store, config, task.name, method, base.outputs["flow"], seed)
            evaluation = cmd_evaluate(
                store, config, tuned.outputs["samples"], reference.outputs["samples"]
            )
            wass[method] = evaluation.metrics["wass"]
        for better, worse in ORDERINGS[task_name]:
            wins[(better, worse)] += wass[better] < wass[worse]
    failing = [pair for pair in ORDERINGS[task_name] if wins[pair] < 2]
    assert not failing, dict(wins)
