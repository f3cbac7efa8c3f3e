"""``adashare`` command-line workbench.

Single-step commands (``synth-gen``, ``policy-learn``, ``retrain``,
``baseline``, ``eval``) share one workspace directory given by ``--out``;
``plan`` runs a whole experiment grid and ``report`` re-renders outputs from
stored manifests.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .evaluation import (
    MetricsReport,
    dumps_json,
    metric_suite,
    render_heatmap_svg,
    results_document,
    task_correlation,
)
from .network import TaskPath, count_flops, load_checkpoint, save_checkpoint, used_parameter_count
from .plan import (
    ExperimentPlan,
    PlanError,
    RunSpec,
    dataset_for,
    execute_run,
    executed_blocks,
    regenerate_reports,
    run_plan,
)
from .policy import DecisionMatrix, policy_from_csv, policy_to_csv
from .synth import save_dataset
from .trainer import BASELINES, Reference, _template, learn_policy, retrain_seeds, sample_and_retrain

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="preset_default", help="preset name or JSON file (default: %(default)s)")
    common.add_argument("--seed", type=int, default=None, help="run seed (default: the config's seeds)")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: %(default)s)")
    common.add_argument("--workers", type=int, default=1, help="worker processes (default: %(default)s)")

    p = _Parser(prog="adashare", description="Learned select-or-skip sharing for multi-task residual networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)

    sub.add_parser("synth-gen", parents=[common], help="generate the synthetic benchmark")
    sub.add_parser("policy-learn", parents=[common], help="warm-up and policy learning")
    r = sub.add_parser("retrain", parents=[common], help="sample decisions from a policy and retrain each")
    r.add_argument("--policy", type=Path, help="policy CSV (default: OUT/policy.csv)")
    b = sub.add_parser("baseline", parents=[common], help="train a baseline")
    b.add_argument("--kind", required=True, choices=BASELINES)
    e = sub.add_parser("eval", parents=[common], help="evaluate the retrained checkpoint")
    e.add_argument("--split", choices=("val", "test"), default="test")
    sub.add_parser("report", parents=[common], help="re-render results from stored manifests")
    sub.add_parser("plan", parents=[common], help="run a full experiment plan")
    return p


# workspace helpers ------------------------------------------------------------


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seeds([args.seed])
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    return cfg


def _seed(cfg: ExperimentConfig) -> int:
    return cfg.seeds[0]


def _workspace(args, cfg: ExperimentConfig) -> Path:
    """Create/validate ``--out`` as a single-seed workspace bound to one config."""
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"config_hash": config_hash(cfg), "seed": _seed(cfg), "config": cfg.to_dict()}
    path = out / "workspace.json"
    if path.exists():
        prior = json.loads(path.read_text(encoding="utf-8"))
        if (prior["config_hash"], prior["seed"]) != (stamp["config_hash"], stamp["seed"]):
            raise PlanError(
                f"{out} belongs to config {prior['config_hash']} seed {prior['seed']}; "
                f"requested {stamp['config_hash']} seed {stamp['seed']}"
            )
    else:
        path.write_text(dumps_json(stamp), encoding="utf-8")
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(path)


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise PlanError(f"{path} not found; run the producing command first")
    return json.loads(path.read_text(encoding="utf-8"))


def _train(cfg: ExperimentConfig):
    return replace(cfg.train, seed=_seed(cfg))


def _baseline_manifest(cfg, out: Path, kind: str, workers: int) -> dict:
    path = out / f"baseline_{kind}.json"
    if path.exists():
        return _read_json(path)
    spec = RunSpec(kind, kind, _seed(cfg), cfg.train, cfg.bench)
    if kind != "single_task":
        spec.reference = _baseline_manifest(cfg, out, "single_task", workers)["reference"]
    if kind in ("random1", "random2"):
        ada = _read_json(out / "retrain.json")
        spec.reference_decision = ada["decisions"][ada["best_index"]]
    manifest = execute_run(spec, workers)
    manifest["config_hash"] = config_hash(cfg)
    _write(path, dumps_json(manifest))
    return json.loads(path.read_text(encoding="utf-8"))


def _reference(cfg, out, workers) -> Reference:
    ref = _baseline_manifest(cfg, out, "single_task", workers)["reference"]
    tup = lambda d: {k: [tuple(m) for m in v] for k, v in d.items()}  # noqa: E731
    return Reference(tup(ref["val"]), tup(ref["test"]))


# commands ---------------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    cfg = _experiment(args)
    out = _workspace(args, cfg)
    data = dataset_for(cfg.bench, _seed(cfg))
    save_dataset(data, out / "dataset.npz")
    print(out / "dataset.npz")
    _write(out / "bench.json", dumps_json(asdict(cfg.bench)))
    return EXIT_OK


def cmd_policy_learn(args) -> int:
    cfg = _experiment(args)
    out = _workspace(args, cfg)
    train = _train(cfg)
    data = dataset_for(cfg.bench, _seed(cfg))
    res = learn_policy(train, data)
    names = [t.name for t in data.tasks]
    _write(out / "policy.csv", policy_to_csv(res.logits, names))
    _write(out / "heatmap.svg", render_heatmap_svg(res.logits.alpha(), names))
    save_checkpoint(res.net, out / "phase1.ckpt")
    print(out / "phase1.ckpt")
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": _seed(cfg),
        "train": asdict(train),
        "iterations": {"warmup": train.warmup_iters, "policy": train.policy_iters},
        "final_temperature": res.trace.temperatures[-1] if res.trace.temperatures else None,
        "final_epoch": res.trace.epochs[-1] if res.trace.epochs else None,
        "correlation": task_correlation(res.logits).values.tolist(),
    }
    _write(out / "policy_manifest.json", dumps_json(manifest))
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg = _experiment(args)
    out = _workspace(args, cfg)
    train = _train(cfg)
    data = dataset_for(cfg.bench, _seed(cfg))
    policy_path = args.policy or out / "policy.csv"
    if not policy_path.exists():
        raise PlanError(f"{policy_path} not found; run policy-learn first")
    logits, names = policy_from_csv(policy_path.read_text(encoding="utf-8"))
    if names != [t.name for t in data.tasks] or logits.block_count != train.block_count:
        raise PlanError(f"{policy_path} does not match the configured tasks/blocks")
    ref = _reference(cfg, out, args.workers)
    art = sample_and_retrain(_template(train, data), logits, train, data, ref, args.workers)
    best = art.retrain_results[art.best_index]
    save_checkpoint(best.net, out / "best.ckpt")
    print(out / "best.ckpt")
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": _seed(cfg),
        "iterations": {"retrain": train.retrain_iters},
        "retrain_seeds": retrain_seeds(train, len(art.sampled_decisions)),
        "decisions": [d.to_list() for d in art.sampled_decisions],
        "best_index": art.best_index,
        "sample_val_deltas": art.val_deltas,
        "executed_blocks": executed_blocks(art.sampled_decisions),
        "val": best.val.to_dict(),
        "test": best.test.to_dict(),
    }
    _write(out / "retrain.json", dumps_json(manifest))
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _experiment(args)
    out = _workspace(args, cfg)
    path = out / f"baseline_{args.kind}.json"
    if path.exists():
        path.unlink()
    _baseline_manifest(cfg, out, args.kind, args.workers)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    out = _workspace(args, cfg)
    train = _train(cfg)
    data = dataset_for(cfg.bench, _seed(cfg))
    rt = _read_json(out / "retrain.json")
    U = DecisionMatrix(np.asarray(rt["decisions"][rt["best_index"]], dtype=bool), "sampled")
    net = _template(train, data)
    load_checkpoint(net, out / "best.ckpt")
    split = getattr(data, args.split)
    per_task = {}
    for k, task in enumerate(data.tasks):
        pred = TaskPath(net, U, k)(split.x).data
        per_task[task.name] = metric_suite(task.loss_kind, pred, split.targets[k])
    ref = _reference(cfg, out, args.workers)
    flops = sum(count_flops(net, U, k) for k in range(len(data.tasks)))
    report = MetricsReport(per_task, getattr(ref, args.split), used_parameter_count(net, U), flops)
    text = dumps_json({"split": args.split, **report.to_dict()})
    (out / f"eval_{args.split}.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    out = args.out
    if (out / "plan.json").exists():
        regenerate_reports(out)
        print(out / "summary.json")
        return EXIT_OK
    ws = _read_json(out / "workspace.json")
    rt = _read_json(out / "retrain.json")
    runs = []
    for kind in BASELINES:
        path = out / f"baseline_{kind}.json"
        if path.exists():
            m = _read_json(path)
            runs.append({"name": kind, **m["test"]})
    runs.append({"name": "adashare", "decisions": rt["decisions"][rt["best_index"]], **rt["test"]})
    corr = None
    if (out / "policy.csv").exists():
        logits, names = policy_from_csv((out / "policy.csv").read_text(encoding="utf-8"))
        corr = task_correlation(logits)
        _write(out / "heatmap.svg", render_heatmap_svg(logits.alpha(), names))
    _write(out / "results.json", dumps_json(results_document(ws["config_hash"], ws["seed"], runs, corr)))
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _experiment(args)
    log = lambda msg: print(msg, file=sys.stderr, flush=True)  # noqa: E731
    run_plan(ExperimentPlan(cfg), args.out, args.workers, log)
    print(args.out / "summary.json")
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "policy-learn": cmd_policy_learn,
    "retrain": cmd_retrain,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "report": cmd_report,
    "plan": cmd_plan,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"adashare: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, PlanError, OSError, ValueError, RuntimeError) as exc:
        print(f"adashare: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
