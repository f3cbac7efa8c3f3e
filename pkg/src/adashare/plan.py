"""Experiment orchestration: runs keyed by (seed, name), resumable run directories,
per-run manifests and a cross-seed summary."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, Variant, config_hash
from .evaluation import MetricsReport, dumps_json, render_heatmap_svg, results_document, task_correlation
from .policy import DecisionMatrix, PolicyLogits, policy_to_csv
from .synth import MultiTaskDataset, SynthBenchConfig, generate_synthetic
from .trainer import (
    Reference,
    TrainConfig,
    retrain_seeds,
    run_adashare,
    run_baseline,
)

MANIFEST = "manifest.json"
PLAN_FILE = "plan.json"
SUMMARY = "summary.json"


class PlanError(RuntimeError):
    pass


@dataclass
class RunSpec:
    name: str
    kind: str  # adashare | single_task | hard_sharing | random1 | random2
    seed: int
    train: TrainConfig
    bench: SynthBenchConfig
    reference: dict | None = None  # {"val": ..., "test": ...} single-task metrics
    reference_decision: list | None = None

    @property
    def key(self) -> str:
        return f"seed{self.seed}/{self.name}"


def dataset_for(bench: SynthBenchConfig, seed: int) -> MultiTaskDataset:
    return generate_synthetic(replace(bench, seed=bench.seed + seed))


def _metrics_from_json(d: dict) -> dict:
    return {name: [tuple(m) for m in ms] for name, ms in d.items()}


def _metrics_to_json(d: dict) -> dict:
    return {name: [list(m) for m in ms] for name, ms in d.items()}


def executed_blocks(decisions: list[DecisionMatrix]) -> float:
    """Mean number of executed blocks per task, averaged over decisions."""
    return float(np.mean([d.u.sum(axis=0).mean() for d in decisions]))


def _iterations(train: TrainConfig) -> dict:
    return {"warmup": train.warmup_iters, "policy": train.policy_iters, "retrain": train.retrain_iters}


def execute_run(spec: RunSpec, workers: int = 1) -> dict:
    """Run one (seed, name) job; returns its manifest (everything the report needs)."""
    data = dataset_for(spec.bench, spec.seed)
    train = replace(spec.train, seed=spec.seed)
    ref = None
    if spec.reference is not None:
        ref = Reference(_metrics_from_json(spec.reference["val"]), _metrics_from_json(spec.reference["test"]))
    manifest = {
        "run": spec.name,
        "kind": spec.kind,
        "seed": spec.seed,
        "tasks": [t.name for t in data.tasks],
        "train": asdict(train),
        "bench": asdict(spec.bench),
        "iterations": _iterations(train),
        "logits": None,
        "sample_val_deltas": [],
    }
    if spec.kind == "adashare":
        policy, art = run_adashare(train, data, ref, workers)
        chosen = art.retrain_results[art.best_index]
        manifest.update(
            logits=policy.logits.raw.tolist(),
            decisions=[d.to_list() for d in art.sampled_decisions],
            best_index=art.best_index,
            sample_val_deltas=art.val_deltas,
            retrain_seeds=retrain_seeds(train, len(art.sampled_decisions)),
            executed_blocks=executed_blocks(art.sampled_decisions),
            val=chosen.val.to_dict(),
            test=chosen.test.to_dict(),
            val_metrics=_metrics_to_json(chosen.val.per_task),
            test_metrics=_metrics_to_json(chosen.test.per_task),
        )
        return manifest
    ref_U = None
    if spec.reference_decision is not None:
        ref_U = DecisionMatrix(np.asarray(spec.reference_decision, dtype=bool), "sampled")
    res = run_baseline(spec.kind, train, data, ref_U, ref, workers)
    if spec.kind == "single_task":
        manifest["reference"] = {"val": _metrics_to_json(res.val.per_task), "test": _metrics_to_json(res.test.per_task)}
    manifest.update(
        decisions=[d.to_list() for d in res.decisions],
        best_index=res.best_index,
        executed_blocks=executed_blocks(res.decisions),
        val=res.val.to_dict(),
        test=res.test.to_dict(),
        val_metrics=_metrics_to_json(res.val.per_task),
        test_metrics=_metrics_to_json(res.test.per_task),
    )
    return manifest


def _run_job(args):
    spec, workers = args
    return execute_run(spec, workers)


# run directories ------------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _rescore(manifest: dict, reference: dict | None) -> tuple[MetricsReport, MetricsReport]:
    val = MetricsReport(_metrics_from_json(manifest["val_metrics"]), params=manifest["val"]["params"],
                        flops=manifest["val"]["flops"])
    test = MetricsReport(_metrics_from_json(manifest["test_metrics"]), params=manifest["test"]["params"],
                         flops=manifest["test"]["flops"])
    if reference is not None:
        val.compute_deltas(_metrics_from_json(reference["val"]))
        test.compute_deltas(_metrics_from_json(reference["test"]))
    return val, test


def write_run_outputs(run_dir: Path, manifest: dict, reference: dict | None) -> None:
    """Results JSON (and policy CSV + heatmap for learned policies) from a manifest alone."""
    val, test = _rescore(manifest, reference)
    entry = {"name": manifest["run"], "kind": manifest["kind"], **test.to_dict(),
             "val_delta_overall": val.delta_overall}
    if manifest.get("decisions"):
        entry["decisions"] = manifest["decisions"][manifest.get("best_index", 0)]
    corr = None
    if manifest.get("logits") is not None:
        logits = PolicyLogits(np.asarray(manifest["logits"], dtype=np.float64))
        corr = task_correlation(logits)
        _write_atomic(run_dir / "policy.csv", policy_to_csv(logits, manifest["tasks"]))
        _write_atomic(run_dir / "heatmap.svg", render_heatmap_svg(logits.alpha(), manifest["tasks"]))
    doc = results_document(manifest["config_hash"], manifest["seed"], [entry], corr)
    _write_atomic(run_dir / "results.json", dumps_json(doc))


def read_manifest(run_dir: Path) -> dict | None:
    path = run_dir / MANIFEST
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


# plans ----------------------------------------------------------------------


@dataclass
class ExperimentPlan:
    config: ExperimentConfig

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def run_names(self) -> list[str]:
        return ["single_task", "hard_sharing", "adashare"] + [v.name for v in self.config.variants]

    def _spec(self, name: str, seed: int, variant: Variant | None = None) -> RunSpec:
        cfg = self.config
        if variant is None:
            return RunSpec(name, name, seed, cfg.train, cfg.bench)
        return RunSpec(name, variant.baseline or "adashare", seed, variant.train_config(cfg.train), cfg.bench)

    def waves(self) -> list[list[RunSpec]]:
        """Single-task references; then everything needing only them; then random baselines."""
        seeds = self.config.seeds
        first = [self._spec("single_task", s) for s in seeds]
        second, third = [], []
        for s in seeds:
            second += [self._spec("hard_sharing", s), self._spec("adashare", s)]
            for v in self.config.variants:
                spec = self._spec(v.name, s, v)
                (third if spec.kind in ("random1", "random2") else second).append(spec)
        return [first, second, third]


def _check_plan_dir(out: Path, plan: ExperimentPlan) -> None:
    path = out / PLAN_FILE
    if path.exists():
        prior = json.loads(path.read_text(encoding="utf-8"))
        if prior.get("config_hash") != plan.hash:
            raise PlanError(
                f"{out} holds runs for config {prior.get('config_hash')}, this config hashes to {plan.hash}; "
                "use a fresh output directory"
            )


def run_plan(plan: ExperimentPlan, out, workers: int = 1, log=None) -> dict:
    """Execute every missing run of ``plan`` under ``out`` and write the summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _check_plan_dir(out, plan)
    h = plan.hash
    # echo every resolved default so the file alone reproduces the plan
    _write_atomic(out / PLAN_FILE, dumps_json({"config_hash": h, "config": plan.config.to_dict()}))
    done: dict[str, dict] = {}

    for wave in plan.waves():
        todo = []
        for spec in wave:
            run_dir = out / spec.key
            prior = read_manifest(run_dir)
            if prior is not None:
                if prior.get("config_hash") != h:
                    raise PlanError(f"{run_dir}: manifest config hash {prior.get('config_hash')} != {h}")
                done[spec.key] = prior
                continue
            ref = done.get(f"seed{spec.seed}/single_task")
            if spec.kind != "single_task":
                spec.reference = ref["reference"]
            if spec.kind in ("random1", "random2"):
                ada = done[f"seed{spec.seed}/adashare"]
                spec.reference_decision = ada["decisions"][ada["best_index"]]
            todo.append(spec)
        if log:
            for spec in todo:
                log(f"run {spec.key}")
        jobs = [(spec, 1) for spec in todo]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_job, jobs))
        else:
            # a lone run may still spread its retrains across workers
            results = [_run_job((spec, workers)) for spec, _ in jobs]
        for spec, manifest in zip(todo, results):
            manifest["config_hash"] = h
            # render from the stored (rounded) form so `report` reproduces these files exactly
            text = dumps_json(manifest)
            manifest = json.loads(text)
            run_dir = out / spec.key
            run_dir.mkdir(parents=True, exist_ok=True)
            ref = manifest.get("reference") if spec.kind == "single_task" else spec.reference
            write_run_outputs(run_dir, manifest, ref)
            # manifest last: its presence marks the run complete
            _write_atomic(run_dir / MANIFEST, text)
            done[spec.key] = manifest

    summary = summarize(plan, done)
    _write_atomic(out / SUMMARY, dumps_json(summary))
    return summary


def _stats(xs: list[float]) -> dict:
    return {"mean": float(np.mean(xs)), "min": float(np.min(xs)), "max": float(np.max(xs))}


def summarize(plan: ExperimentPlan, manifests: dict[str, dict]) -> dict:
    variants = {}
    for name in plan.run_names():
        rows = [manifests[f"seed{s}/{name}"] for s in plan.config.seeds]
        refs = [manifests[f"seed{s}/single_task"]["reference"] for s in plan.config.seeds]
        scored = [_rescore(m, r) for m, r in zip(rows, refs)]
        variants[name] = {
            "kind": rows[0]["kind"],
            "val_delta_T": _stats([v.delta_overall for v, _ in scored]),
            "test_delta_T": _stats([t.delta_overall for _, t in scored]),
            "executed_blocks": float(np.mean([m["executed_blocks"] for m in rows])),
            "params": float(np.mean([t.params for _, t in scored])),
            "flops": float(np.mean([t.flops for _, t in scored])),
        }
    return {"config_hash": plan.hash, "seeds": list(plan.config.seeds), "variants": variants}


def regenerate_reports(out) -> dict:
    """Rewrite every results JSON, policy CSV, heatmap and the summary from stored manifests."""
    out = Path(out)
    path = out / PLAN_FILE
    if not path.exists():
        raise PlanError(f"{out}: no {PLAN_FILE}; not a plan directory")
    stored = json.loads(path.read_text(encoding="utf-8"))
    plan = ExperimentPlan(ExperimentConfig.from_dict(stored["config"]))
    manifests = {}
    for seed in plan.config.seeds:
        for name in plan.run_names():
            m = read_manifest(out / f"seed{seed}" / name)
            if m is None:
                raise PlanError(f"{out}/seed{seed}/{name}: run incomplete; rerun the plan first")
            manifests[f"seed{seed}/{name}"] = m
    for key, m in manifests.items():
        ref = manifests[f"seed{m['seed']}/single_task"]["reference"]
        write_run_outputs(out / key, m, ref)
    summary = summarize(plan, manifests)
    _write_atomic(out / SUMMARY, dumps_json(summary))
    return summary
