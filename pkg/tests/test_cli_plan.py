import json
from pathlib import Path

import pytest

from adashare.cli import main
from adashare.config import ConfigError, ExperimentConfig, Variant, config_hash, load_config
from adashare.plan import ExperimentPlan, PlanError, regenerate_reports, run_plan


def files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke_plan(tmp_path_factory):
    out = tmp_path_factory.mktemp("plan")
    cfg = load_config("preset_smoke").with_seeds([0, 1])
    summary = run_plan(ExperimentPlan(cfg), out)
    return cfg, out, summary


# configuration


def test_presets_load_and_validate():
    for name in ("preset_default", "preset_sparsity_sweep", "preset_smoke"):
        cfg = load_config(name)
        assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_hash_ignores_seeds_only():
    cfg = load_config("preset_smoke")
    assert config_hash(cfg) == config_hash(cfg.with_seeds([3, 4]))
    d = cfg.to_dict()
    d["train"]["policy_lr"] = 0.02
    assert config_hash(ExperimentConfig.from_dict(d)) != config_hash(cfg)


def test_config_file_missing_fields_default(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"sparsity_weight": 0.1}, "seeds": [2]}))
    cfg = load_config(path)
    assert cfg.train.sparsity_weight == 0.1 and cfg.seeds == [2]
    assert [t.name for t in cfg.bench.tasks] == ["A", "B", "C"]


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"train": {"nope": 1}},
        {"seeds": []},
        {"train": {"width": 32}},
        {"variants": [{"name": "x", "overrides": {"seed": 4}}]},
        {"variants": [{"name": "x", "overrides": {"warp": 1}}]},
        {"variants": [{"name": "x", "baseline": "oracle"}]},
        {"variants": [{"name": "adashare"}]},
        {"variants": [{"name": "x"}, {"name": "x"}]},
        {"variants": [{"name": "x", "overrides": {"policy_lr": -1.0}}]},
    ],
)
def test_invalid_configs_rejected(tmp_path, doc):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(path)


def test_unreadable_and_malformed_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.json")


def test_variant_overrides_apply():
    cfg = load_config("preset_smoke")
    assert Variant("v", {"curriculum": False}).train_config(cfg.train).curriculum is False


# plans


def test_plan_without_variants_has_three_runs_per_seed():
    cfg = load_config("preset_smoke").with_seeds([0, 1, 2])
    cfg.variants = []
    plan = ExperimentPlan(cfg)
    assert sum(len(w) for w in plan.waves()) == 9
    assert {s.kind for s in plan.waves()[0]} == {"single_task"}


def test_plan_writes_every_run(smoke_plan):
    cfg, out, summary = smoke_plan
    assert set(summary["variants"]) == {"single_task", "hard_sharing", "adashare", "no_curriculum", "random1"}
    for seed in cfg.seeds:
        for name in summary["variants"]:
            assert (out / f"seed{seed}" / name / "manifest.json").exists()
            assert (out / f"seed{seed}" / name / "results.json").exists()
        assert (out / f"seed{seed}" / "adashare" / "policy.csv").exists()
        assert (out / f"seed{seed}" / "adashare" / "heatmap.svg").exists()
    st = summary["variants"]["single_task"]["test_delta_T"]
    assert st == {"mean": 0.0, "min": 0.0, "max": 0.0}


def test_plan_rerun_is_noop(smoke_plan):
    cfg, out, _ = smoke_plan
    before = files(out)
    logged = []
    run_plan(ExperimentPlan(cfg), out, log=logged.append)
    assert logged == []
    assert files(out) == before


def test_plan_refuses_foreign_directory(smoke_plan):
    cfg, out, _ = smoke_plan
    d = cfg.to_dict()
    d["train"]["policy_lr"] = 0.123
    with pytest.raises(PlanError):
        run_plan(ExperimentPlan(ExperimentConfig.from_dict(d)), out)


def test_report_regenerates_identical_outputs(smoke_plan):
    _, out, _ = smoke_plan
    before = files(out)
    for p in out.rglob("results.json"):
        p.unlink()
    for p in out.rglob("policy.csv"):
        p.write_text("garbage")
    (out / "summary.json").unlink()
    regenerate_reports(out)
    assert files(out) == before


def test_interrupted_run_resumes(smoke_plan, tmp_path):
    cfg, out, _ = smoke_plan
    import shutil

    shutil.copytree(out, tmp_path / "p")
    (tmp_path / "p" / "seed1" / "random1" / "manifest.json").unlink()
    logged = []
    run_plan(ExperimentPlan(cfg), tmp_path / "p", log=logged.append)
    assert logged == ["run seed1/random1"]
    assert files(tmp_path / "p") == files(out)


@pytest.mark.slow
def test_worker_count_does_not_change_outputs(smoke_plan, tmp_path):
    cfg, out, _ = smoke_plan
    run_plan(ExperimentPlan(cfg), tmp_path, workers=4)
    assert files(tmp_path) == files(out)


# command line


def test_cli_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["plan", "--bogus"]) == 1
    assert main(["baseline", "--kind", "oracle"]) == 1
    assert main(["plan", "--config", "preset_smoke", "--workers", "0"]) == 1


def test_cli_runtime_errors_exit_two(tmp_path, capsys):
    assert main(["plan", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    assert main(["retrain", "--config", "preset_smoke", "--out", str(tmp_path / "ws")]) == 2
    assert main(["report", "--out", str(tmp_path / "empty")]) == 2


def test_cli_workspace_pipeline(tmp_path, capsys):
    ws = tmp_path / "ws"
    common = ["--config", "preset_smoke", "--seed", "0", "--out", str(ws)]
    for cmd in (["synth-gen"], ["policy-learn"], ["retrain"], ["baseline", "--kind", "hard_sharing"],
                ["baseline", "--kind", "random2"], ["eval", "--split", "test"], ["report"]):
        assert main(cmd + common) == 0, cmd
    for name in ("dataset.npz", "policy.csv", "heatmap.svg", "best.ckpt", "retrain.json",
                 "baseline_single_task.json", "eval_test.json", "results.json"):
        assert (ws / name).exists()
    ev = json.loads((ws / "eval_test.json").read_text())
    rt = json.loads((ws / "retrain.json").read_text())
    assert ev["delta_overall"] == rt["test"]["delta_overall"]
    doc = json.loads((ws / "results.json").read_text())
    assert {r["name"] for r in doc["runs"]} >= {"single_task", "hard_sharing", "random2", "adashare"}
    # a workspace is bound to its seed
    assert main(["synth-gen", "--config", "preset_smoke", "--seed", "1", "--out", str(ws)]) == 2


def test_cli_plan_and_report(tmp_path, capsys):
    cfg = load_config("preset_smoke")
    cfg.variants = []
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    out = tmp_path / "runs"
    assert main(["plan", "--config", str(path), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["variants"]) == {"single_task", "hard_sharing", "adashare"}
    before = files(out)
    assert main(["report", "--out", str(out)]) == 0
    assert files(out) == before
