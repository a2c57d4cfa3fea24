import numpy as np
import pytest

from sbi_ttt.experiments.manifest import ExperimentManifest
from sbi_ttt.experiments.report import (
    METHOD_ORDER,
    PairplotData,
    format_csv,
    format_table,
    pairplot_data,
    summarize,
    write_pairplot,
    write_report,
)
from sbi_ttt.experiments.tasks import get_task
from sbi_ttt.models.schema import load_document


def _evaluation(task, method, seed, wass, mmd_sq):
    return ExperimentManifest(
        command="evaluate",
        task=task,
        method=method,
        seed=seed,
        arguments={},
        config={},
        seeds={"estimate": seed},
        metrics={"wass": wass, "mmd_sq": mmd_sq},
        wall_seconds=0.0,
        created_at="2026-01-01T00:00:00Z",
    )


def _manifests():
    manifests = [
        _evaluation("bh_beta60", method, seed, 0.1 * (i + 1) + seed, 0.01 * (i + 1))
        for i, method in enumerate(reversed(METHOD_ORDER))
        for seed in (0, 1)
    ]
    pretrain = _evaluation("bh_beta60", "ttt", 0, 9.0, 9.0).model_copy(
        update={"command": "pretrain"}
    )
    return [*manifests, pretrain]


def test_summary_has_one_row_per_method_in_table_order():
    rows = summarize(_manifests())
    assert [r.method for r in rows] == list(METHOD_ORDER)
    assert all(r.n_seeds == 2 for r in rows)
    # gs-pea was listed first, so it carries the smallest values
    assert rows[-1].wass == pytest.approx(0.6)
    assert rows[-1].mmd_sq == pytest.approx(0.01)


def test_table_and_csv_layout(tmp_path):
    rows = summarize(_manifests())
    table = format_table(rows).splitlines()
    assert len(table) == 1 + len(METHOD_ORDER)
    assert table[1].startswith("bh_beta60")
    assert "GradSubspace-PEA" in table[-1]
    csv = format_csv(rows).splitlines()
    assert csv[0] == "task,method,wass,mmd_sq"
    assert csv[-1].startswith("bh_beta60,gs-pea,")
    paths = write_report(rows, tmp_path)
    assert paths["table"].read_text(encoding="utf-8") == format_table(rows)
    assert paths["csv"].read_text(encoding="utf-8") == format_csv(rows)


def test_pairplot_histograms_integrate_to_one(tmp_path):
    task = get_task("bh_beta60")
    samples = task.prior.sample(500, 0)
    data = pairplot_data(task, "gs-pea", samples, bins=10)
    assert len(data.marginals) == 4
    assert len(data.pairs) == 6
    for marginal in data.marginals:
        widths = np.diff(marginal.edges)
        assert np.sum(np.asarray(marginal.density) * widths) == pytest.approx(1.0)
    assert data.marginals[3].ground_truth == -0.2
    path = write_pairplot(data, tmp_path, seed=2)
    assert path.name == "hist-bh_beta60-gs-pea-seed-2.json"
    assert load_document(path, PairplotData) == data
