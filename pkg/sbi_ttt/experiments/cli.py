"""
Command-line entry point.

    sbi-ttt pretrain bh_beta120 --seed 0
    sbi-ttt finetune bh_beta60 --method gs-pea --base <flow.json> --seed 0
    sbi-ttt reference bh_beta60 --seed 0
    sbi-ttt evaluate <samples.csv> <reference samples.csv>
    sbi-ttt report <manifest.json> ...
    sbi-ttt replay <manifest.json>

Each command writes its outputs and a manifest into its run directory; commands only
communicate through those files.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import tempfile
import time
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from sbi_ttt.errors import ArtifactError, ConfigError, SBIError
from sbi_ttt.events import configure_logging, log_event
from sbi_ttt.experiments.artifacts import REFERENCE_SCHEMA_VERSION, ArtifactStore, ReferenceRecord
from sbi_ttt.experiments.config import ExperimentConfig, artifact_root, build_config, resolve_config
from sbi_ttt.experiments.manifest import (
    MANIFEST_NAME,
    Command,
    ExperimentManifest,
    file_digest,
    load_manifest,
    save_manifest,
    utc_timestamp,
)
from sbi_ttt.experiments.report import (
    ReportRow,
    format_table,
    pairplot_data,
    summarize,
    write_pairplot,
    write_report,
)
from sbi_ttt.experiments.tasks import get_task
from sbi_ttt.inference.adapt import (
    AdaptResult,
    check_checkpoint,
    finetune_full,
    finetune_gradsubspace_pea,
    finetune_gradsubspace_ttt,
    finetune_lora,
)
from sbi_ttt.inference.metrics import evaluate_samples
from sbi_ttt.inference.reference import run_reference
from sbi_ttt.inference.snpe import RoundRecord, run_snpe
from sbi_ttt.inference.subspace import save_subspace
from sbi_ttt.models.flow import (
    ConditionalFlow,
    embed_observation,
    flow_sample_in_box,
    load_flow,
    save_flow,
)
from sbi_ttt.models.lora import lora_attach, save_adapter
from sbi_ttt.models.schema import write_document
from sbi_ttt.simulation.batch import derive_seeds
from sbi_ttt.simulation.datasets import read_samples, write_pairs, write_samples
from sbi_ttt.simulation.types import TimeSeries

METHODS = ("snpe", "ttt", "lora", "gs-ttt", "gs-pea")


def _seeds(seed: int, *names: str) -> dict[str, int]:
    return {name: int(s) for name, s in zip(names, derive_seeds(seed, len(names)), strict=True)}


def _round_metrics(rounds: Sequence[RoundRecord]) -> dict[str, float]:
    metrics: dict[str, float] = {}
    for record in rounds:
        metrics[f"round{record.round_index}.best_val_loss"] = record.train.best_val_loss
        metrics[f"round{record.round_index}.acceptance"] = record.acceptance
    return metrics


def _finish(
    out_dir: Path,
    *,
    command: Command,
    task: str,
    seed: int,
    arguments: Mapping[str, Any],
    config: ExperimentConfig,
    seeds: Mapping[str, int],
    started: float,
    method: str | None = None,
    inputs: Mapping[str, Path] | None = None,
    outputs: Mapping[str, Path] | None = None,
    digested: Sequence[str] = (),
    metrics: Mapping[str, float] | None = None,
    dims: Mapping[str, int] | None = None,
) -> ExperimentManifest:
    outputs = dict(outputs or {})
    manifest = ExperimentManifest(
        command=command,
        task=task,
        method=method,
        seed=seed,
        arguments=dict(arguments),
        config=config.model_dump(),
        seeds=dict(seeds),
        inputs={k: str(v) for k, v in (inputs or {}).items()},
        outputs={k: str(v) for k, v in outputs.items()},
        digests={k: file_digest(outputs[k]) for k in digested},
        metrics={k: float(v) for k, v in (metrics or {}).items()},
        dims=dict(dims or {}),
        wall_seconds=time.perf_counter() - started,
        created_at=utc_timestamp(),
    )
    save_manifest(manifest, out_dir)
    log_event(
        "cli.command",
        command=command,
        task=task,
        method=method,
        seed=seed,
        out_dir=str(out_dir),
        wall_seconds=manifest.wall_seconds,
    )
    return manifest


# --- commands ------------------------------------------------------------------------------


def cmd_pretrain(
    store: ArtifactStore,
    config: ExperimentConfig,
    task_name: str,
    seed: int,
    out_dir: str | Path | None = None,
    overwrite: bool = False,
) -> ExperimentManifest:
    """Train a flow from scratch with SNPE at the task's own observation."""
    started = time.perf_counter()
    task = get_task(task_name)
    out = store.claim(out_dir or store.run_dir(task.name, "pretrain", seed), overwrite)
    seeds = _seeds(seed, "flow", "snpe")
    y = store.observation(task, config.observation_seed)
    flow = ConditionalFlow.build(config.flow_config(task), seeds["flow"])
    result = run_snpe(
        task.prior, task.simulator(), y, flow, config.schedule(), seeds["snpe"], config.workers
    )
    dataset = result.dataset
    outputs = {
        "flow": save_flow(result.flow, out / "flow.json"),
        "pairs": out / "pairs.csv",
    }
    write_pairs(outputs["pairs"], dataset.thetas, dataset.series, dataset.seeds, dataset.rounds)
    return _finish(
        out,
        command="pretrain",
        task=task.name,
        seed=seed,
        arguments={"task": task.name, "seed": seed},
        config=config,
        seeds=seeds,
        started=started,
        outputs=outputs,
        digested=("flow", "pairs"),
        metrics=_round_metrics(result.rounds),
        dims={"total": result.flow.store.size},
    )


def _adapt(
    method: str,
    base: ConditionalFlow,
    config: ExperimentConfig,
    task_name: str,
    y: TimeSeries,
    seeds: Mapping[str, int],
    out: Path,
) -> tuple[AdaptResult, dict[str, Path]]:
    task = get_task(task_name)
    simulator, schedule = task.simulator(), config.schedule()
    workers = config.workers
    if method == "ttt":
        return finetune_full(base, simulator, y, task.prior, schedule, seeds["snpe"], workers), {}
    if method == "lora":
        adapter = lora_attach(base.store, config.lora_spec(), seeds["adapter"])
        result = finetune_lora(
            base, adapter, simulator, y, task.prior, schedule, seeds["snpe"], workers
        )
        return result, {"adapter": save_adapter(adapter, out / "adapter.json")}
    finetune = finetune_gradsubspace_ttt if method == "gs-ttt" else finetune_gradsubspace_pea
    result = finetune(
        base, simulator, y, task.prior, schedule, config.subspace_spec(), seeds["snpe"], workers
    )
    subspace = result.subspaces[-1].subspace
    return result, {"subspace": save_subspace(subspace, out / "subspace.json")}


def cmd_finetune(
    store: ArtifactStore,
    config: ExperimentConfig,
    task_name: str,
    method: str,
    base_checkpoint: str | Path,
    seed: int,
    out_dir: str | Path | None = None,
    overwrite: bool = False,
) -> ExperimentManifest:
    """
    Adapt a pretrained flow to the task's simulator and observation, then draw the
    evaluation samples at the observation.

    Method "snpe" skips adaptation and samples the pretrained flow as it is.
    """
    started = time.perf_counter()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    task = get_task(task_name)
    base_path = Path(base_checkpoint).resolve()
    base = load_flow(base_path)
    out = store.claim(out_dir or store.run_dir(task.name, method, seed), overwrite)
    seeds = _seeds(seed, "adapter", "snpe", "samples")
    y = store.observation(task, config.observation_seed)
    check_checkpoint(base, y, task.prior)

    outputs: dict[str, Path] = {}
    metrics: dict[str, float] = {}
    if method == "snpe":
        flow = base
        dims = {"trainable": 0, "total": base.store.size}
    else:
        result, outputs = _adapt(method, base, config, task.name, y, seeds, out)
        flow = result.flow
        dims = {"trainable": result.trainable_dim, "total": result.total_dim}
        if result.subspaces:
            record = result.subspaces[-1]
            dims["subspace_rank"] = record.subspace.rank
            dims["snapshot_batch_size"] = min(r.snapshot_batch_size for r in result.subspaces)
        metrics.update(_round_metrics(result.snpe.rounds))

    outputs["flow"] = save_flow(flow, out / "flow.json")
    samples, acceptance = flow_sample_in_box(
        flow, embed_observation(flow, y), config.eval_samples, task.prior, seeds["samples"]
    )
    outputs["samples"] = out / "samples.csv"
    write_samples(outputs["samples"], samples)
    metrics["sample_acceptance"] = acceptance
    return _finish(
        out,
        command="finetune",
        task=task.name,
        method=method,
        seed=seed,
        arguments={
            "task": task.name,
            "method": method,
            "base_checkpoint": str(base_path),
            "seed": seed,
        },
        config=config,
        seeds=seeds,
        started=started,
        inputs={"base_checkpoint": base_path},
        outputs=outputs,
        digested=tuple(outputs),
        metrics=metrics,
        dims=dims,
    )


def cmd_reference(
    store: ArtifactStore,
    config: ExperimentConfig,
    task_name: str,
    seed: int,
    out_dir: str | Path | None = None,
    overwrite: bool = False,
) -> ExperimentManifest:
    """MH reference posterior at the task's observation, cached by (task, seed, MH config)."""
    started = time.perf_counter()
    task = get_task(task_name)
    out = store.claim(out_dir or store.run_dir(task.name, "reference", seed), overwrite)
    y = store.observation(task, config.observation_seed)
    mh = config.mh_config()
    cache_payload = {**dataclasses.asdict(mh), "observation_seed": config.observation_seed}
    key = store.reference_key(task.name, seed, cache_payload)

    cached = store.get_reference(task.name, key)
    if cached is None:
        result = run_reference(
            task.loglik(y), task.prior, mh, seed, require_converged=config.require_converged
        )
        record = ReferenceRecord(
            schema_version=REFERENCE_SCHEMA_VERSION,
            task=task.name,
            key=key,
            seed=seed,
            mh_config=cache_payload,
            rhat=result.rhat.tolist(),
            acceptance=result.acceptance,
            chain_seeds=result.seeds,
            n_pooled=int(result.samples.shape[0]),
        )
        store.put_reference(record, result.samples)
        pooled = result.samples
    else:
        record, pooled = cached

    # evenly spaced over the pooled chains, so every chain contributes
    n = min(config.eval_samples, pooled.shape[0])
    subset = pooled[np.linspace(0, pooled.shape[0] - 1, n).round().astype(int)]
    outputs = {"samples": out / "samples.csv"}
    write_samples(outputs["samples"], subset)
    return _finish(
        out,
        command="reference",
        task=task.name,
        seed=seed,
        arguments={"task": task.name, "seed": seed},
        config=config,
        seeds={"mh": seed, **{f"chain{i}": s for i, s in enumerate(record.chain_seeds)}},
        started=started,
        inputs={"cache": store.reference_dir(task.name, key)},
        outputs=outputs,
        digested=("samples",),
        metrics={"rhat_max": max(record.rhat), "n_pooled": record.n_pooled},
    )


def _sibling_manifest(samples_path: Path) -> ExperimentManifest | None:
    path = samples_path.parent / MANIFEST_NAME
    return load_manifest(path) if path.exists() else None


def cmd_evaluate(
    store: ArtifactStore,
    config: ExperimentConfig,
    estimate_samples: str | Path,
    reference_samples: str | Path,
    task_name: str | None = None,
    method: str | None = None,
    out_dir: str | Path | None = None,
    overwrite: bool = False,
) -> ExperimentManifest:
    """WASS and MMD^2 between an estimate and a reference sample file."""
    started = time.perf_counter()
    estimate_path = Path(estimate_samples).resolve()
    reference_path = Path(reference_samples).resolve()
    producer = _sibling_manifest(estimate_path)
    reference_run = _sibling_manifest(reference_path)
    task = task_name or (producer.task if producer else None)
    method = method or (producer.method if producer else None)
    if task is None or method is None:
        raise ConfigError("pass --task and --method when the estimate has no run manifest")
    seeds = {"estimate": producer.seed} if producer else {}
    if reference_run is not None:
        seeds["reference"] = reference_run.seed

    out = store.claim(out_dir or estimate_path.parent / "evaluation", overwrite)
    report = evaluate_samples(
        read_samples(estimate_path),
        read_samples(reference_path),
        task=task,
        method=method,
        seeds=list(seeds.values()),
        timestamp=utc_timestamp(),
    )
    report_path = write_document(out / "metrics.json", report)
    log_event("metrics.report", task=task, method=method, wass=report.wass, mmd_sq=report.mmd_sq)
    return _finish(
        out,
        command="evaluate",
        task=task,
        method=method,
        seed=seeds.get("estimate", 0),
        arguments={
            "estimate_samples": str(estimate_path),
            "reference_samples": str(reference_path),
            "task": task,
            "method": method,
        },
        config=config,
        seeds=seeds,
        started=started,
        inputs={"estimate": estimate_path, "reference": reference_path},
        outputs={"report": report_path},
        metrics={"wass": report.wass, "mmd_sq": report.mmd_sq},
        dims={"n_est": report.n_est, "n_ref": report.n_ref},
    )


def cmd_report(manifests: Sequence[str | Path], out_dir: str | Path) -> list[ReportRow]:
    """Text table and CSV over evaluate manifests, plus histogram data for every estimate."""
    loaded = [load_manifest(path) for path in manifests]
    evaluations = [m for m in loaded if m.command == "evaluate"]
    if not evaluations:
        raise ArtifactError("no evaluate manifests among the inputs")
    rows = summarize(evaluations)
    write_report(rows, out_dir)
    references: set[tuple[str, str]] = set()
    for manifest in evaluations:
        task = get_task(manifest.task)
        estimate = read_samples(manifest.inputs["estimate"])
        assert manifest.method is not None
        write_pairplot(pairplot_data(task, manifest.method, estimate), out_dir, manifest.seed)
        reference = manifest.inputs["reference"]
        if (task.name, reference) not in references:
            references.add((task.name, reference))
            data = pairplot_data(task, "reference", read_samples(reference))
            write_pairplot(data, out_dir, manifest.seeds.get("reference", 0))
    print(format_table(rows), end="")
    return rows


def run_command(
    command: Command,
    store: ArtifactStore,
    config: ExperimentConfig,
    arguments: Mapping[str, Any],
    out_dir: str | Path | None = None,
    overwrite: bool = False,
) -> ExperimentManifest:
    if command == "pretrain":
        return cmd_pretrain(
            store, config, arguments["task"], arguments["seed"], out_dir, overwrite
        )
    if command == "finetune":
        return cmd_finetune(
            store,
            config,
            arguments["task"],
            arguments["method"],
            arguments["base_checkpoint"],
            arguments["seed"],
            out_dir,
            overwrite,
        )
    if command == "reference":
        return cmd_reference(
            store, config, arguments["task"], arguments["seed"], out_dir, overwrite
        )
    return cmd_evaluate(
        store,
        config,
        arguments["estimate_samples"],
        arguments["reference_samples"],
        arguments["task"],
        arguments["method"],
        out_dir,
        overwrite,
    )


def cmd_replay(manifest_path: str | Path) -> bool:
    """Re-run a recorded command in a scratch root and compare its outputs bit for bit."""
    recorded = load_manifest(manifest_path)
    config = build_config(recorded.config)
    with tempfile.TemporaryDirectory(prefix="sbi-ttt-replay-") as scratch:
        store = ArtifactStore(scratch)
        rerun = run_command(
            recorded.command, store, config, recorded.arguments, Path(scratch) / "replay"
        )
    metrics_match = rerun.metrics == recorded.metrics
    digests_match = rerun.digests == recorded.digests
    log_event(
        "cli.replay",
        manifest=str(manifest_path),
        metrics_match=metrics_match,
        digests_match=digests_match,
    )
    return metrics_match and digests_match


# --- argument parsing --------------------------------------------------------------------


def _parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="sbi-ttt", description="SNPE with test-time adaptation for agent-based models."
    )
    parser.add_argument("--artifact-root", default=None, help="defaults to $SBI_TTT_ARTIFACT_ROOT")
    parser.add_argument("--config", default=None, help="flat `key = value` config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="config override"
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    pretrain = sub.add_parser("pretrain", help="train a flow from scratch")
    pretrain.add_argument("task")

    finetune = sub.add_parser("finetune", help="adapt a pretrained flow")
    finetune.add_argument("task")
    finetune.add_argument("--method", choices=METHODS, required=True)
    finetune.add_argument("--base", required=True, help="pretrained flow checkpoint")

    reference = sub.add_parser("reference", help="MH reference posterior")
    reference.add_argument("task")

    evaluate = sub.add_parser("evaluate", help="WASS and MMD^2 between two sample files")
    evaluate.add_argument("estimate")
    evaluate.add_argument("reference")
    evaluate.add_argument("--task", default=None)
    evaluate.add_argument("--method", default=None)

    for command in (pretrain, finetune, reference, evaluate):
        if command is not evaluate:
            command.add_argument("--seed", type=int, default=0)
        command.add_argument("--out", default=None, help="run directory override")
        command.add_argument("--overwrite", action="store_true")

    report = sub.add_parser("report", help="tables and histogram data over evaluate manifests")
    report.add_argument("manifests", nargs="+")
    report.add_argument("--out", default=None)

    replay = sub.add_parser("replay", help="re-run a manifest and compare its outputs")
    replay.add_argument("manifest")
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.log_level)
    try:
        store = ArtifactStore(artifact_root(args.artifact_root))
        if args.command == "report":
            cmd_report(args.manifests, args.out or store.root / "report")
            return 0
        if args.command == "replay":
            return 0 if cmd_replay(args.manifest) else 1
        config = resolve_config(args.config, args.set)
        if args.command == "evaluate":
            arguments = {
                "estimate_samples": args.estimate,
                "reference_samples": args.reference,
                "task": args.task,
                "method": args.method,
            }
        else:
            arguments = {"task": args.task, "seed": args.seed}
            if args.command == "finetune":
                arguments.update(method=args.method, base_checkpoint=args.base)
        run_command(args.command, store, config, arguments, args.out, args.overwrite)
    except SBIError as exc:
        log_event(
            "cli.error",
            level=logging.ERROR,
            command=args.command,
            error=type(exc).__name__,
            message=str(exc),
        )
        return 1
    return 0
