import numpy as np
import pytest

from sbi_ttt.errors import ArtifactError
from sbi_ttt.experiments.artifacts import (
    REFERENCE_SCHEMA_VERSION,
    ArtifactStore,
    ReferenceRecord,
    stable_key,
)
from sbi_ttt.experiments.manifest import (
    ExperimentManifest,
    file_digest,
    load_manifest,
    save_manifest,
)
from sbi_ttt.experiments.tasks import get_task, observation_for


def _manifest(**overrides):
    fields = dict(
        command="pretrain",
        task="bh_beta120",
        seed=0,
        arguments={"task": "bh_beta120", "seed": 0},
        config={},
        seeds={"flow": 1},
        wall_seconds=0.5,
        created_at="2026-01-01T00:00:00Z",
    )
    fields.update(overrides)
    return ExperimentManifest(**fields)


def test_stable_key_ignores_key_order():
    a = stable_key({"task": "x", "mh": {"thin": 5, "burn_in": 10}})
    b = stable_key({"mh": {"burn_in": 10, "thin": 5}, "task": "x"})
    assert a == b
    assert a != stable_key({"task": "x", "mh": {"thin": 4, "burn_in": 10}})


def test_run_dir_layout(tmp_path):
    store = ArtifactStore(tmp_path)
    assert store.run_dir("bh_beta60", "gs-pea", 3) == tmp_path / "runs/bh_beta60/gs-pea/seed-3"


def test_claim_refuses_seed_collision(tmp_path):
    store = ArtifactStore(tmp_path)
    out = store.claim(store.run_dir("bh_beta120", "pretrain", 0))
    save_manifest(_manifest(), out)
    with pytest.raises(ArtifactError, match="seed collision"):
        store.claim(out)
    assert store.claim(out, overwrite=True) == out


def test_manifest_round_trip_and_version_check(tmp_path):
    path = save_manifest(_manifest(metrics={"wass": 0.25}), tmp_path)
    loaded = load_manifest(tmp_path)
    assert loaded.metrics == {"wass": 0.25}
    assert load_manifest(path) == loaded
    save_manifest(_manifest(schema_version=99), tmp_path)
    with pytest.raises(ArtifactError):
        load_manifest(tmp_path)


def test_file_digest_tracks_content(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("a\n", encoding="utf-8")
    first = file_digest(path)
    assert first == file_digest(path)
    path.write_text("b\n", encoding="utf-8")
    assert file_digest(path) != first


def test_observation_is_cached_and_seed_checked(tmp_path):
    store = ArtifactStore(tmp_path)
    task = get_task("bh_beta60")
    y = store.observation(task, 0)
    np.testing.assert_array_equal(y.features(), observation_for(task, 0).features())
    assert store.observation_path(task.name).exists()
    np.testing.assert_array_equal(store.observation(task, 0).features(), y.features())
    with pytest.raises(ArtifactError, match="observation seed 0"):
        store.observation(task, 1)


def test_reference_cache_round_trip(tmp_path):
    store = ArtifactStore(tmp_path)
    key = store.reference_key("mvgbm", 0, {"thin": 5})
    assert store.get_reference("mvgbm", key) is None
    pooled = np.random.default_rng(0).uniform(-1, 1, size=(12, 3))
    record = ReferenceRecord(
        schema_version=REFERENCE_SCHEMA_VERSION,
        task="mvgbm",
        key=key,
        seed=0,
        mh_config={"thin": 5},
        rhat=[1.0, 1.01, 1.02],
        acceptance=[0.2, 0.3],
        chain_seeds=[11, 12],
        n_pooled=12,
    )
    store.put_reference(record, pooled)
    cached = store.get_reference("mvgbm", key)
    assert cached is not None
    assert cached[0] == record
    np.testing.assert_array_equal(cached[1], pooled)
