"""Experiment configuration: JSON files, built-in presets and the numerics hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .synth import SynthBenchConfig, SynthTask, default_tasks
from .trainer import BASELINES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Variant:
    """A named departure from the base run: TrainConfig overrides and/or a baseline kind."""

    name: str
    overrides: dict = field(default_factory=dict)
    baseline: str | None = None

    def __post_init__(self):
        known = {f.name for f in fields(TrainConfig)}
        bad = sorted(set(self.overrides) - known)
        if bad:
            raise ConfigError(f"variant {self.name!r}: unknown override(s) {', '.join(bad)}")
        if "seed" in self.overrides:
            raise ConfigError(f"variant {self.name!r}: seeds come from the plan, not overrides")
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ConfigError(f"variant {self.name!r}: unknown baseline {self.baseline!r}")

    def train_config(self, base: TrainConfig) -> TrainConfig:
        try:
            return TrainConfig(**{**asdict(base), **self.overrides})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"variant {self.name!r}: {exc}") from None


RESERVED_NAMES = ("single_task", "hard_sharing", "adashare")


@dataclass
class ExperimentConfig:
    bench: SynthBenchConfig
    train: TrainConfig
    seeds: list[int] = field(default_factory=lambda: [0])
    variants: list[Variant] = field(default_factory=list)

    def __post_init__(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("variant names must be unique")
        clash = set(names) & set(RESERVED_NAMES)
        if clash:
            raise ConfigError(f"variant name(s) reserved for core runs: {', '.join(sorted(clash))}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.bench.trunk_width != self.train.width:
            raise ConfigError(f"bench trunk_width {self.bench.trunk_width} != train width {self.train.width}")
        for v in self.variants:
            v.train_config(self.train)

    def to_dict(self) -> dict:
        return {
            "bench": asdict(self.bench),
            "train": asdict(self.train),
            "seeds": list(self.seeds),
            "variants": [asdict(v) for v in self.variants],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - {"bench", "train", "seeds", "variants"}
        if extra:
            raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(extra))}")
        try:
            bench_d = dict(d.get("bench", {}))
            if "tasks" not in bench_d:
                bench_d["tasks"] = [asdict(t) for t in default_tasks()]
            bench = SynthBenchConfig(**bench_d)
            train = TrainConfig(**d.get("train", {}))
            variants = [v if isinstance(v, Variant) else Variant(**v) for v in d.get("variants", [])]
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        seeds = [int(s) for s in d.get("seeds", [0])]
        return cls(bench, train, seeds, variants)

    def with_seeds(self, seeds: list[int]) -> "ExperimentConfig":
        return ExperimentConfig(self.bench, self.train, list(seeds), self.variants)


def config_hash(obj) -> str:
    """SHA-256 over canonical JSON of numerics-bearing fields.

    Accepts an ExperimentConfig (seeds excluded; they key the runs) or any
    JSON-able object.
    """
    if isinstance(obj, ExperimentConfig):
        obj = {k: v for k, v in obj.to_dict().items() if k != "seeds"}
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _default() -> ExperimentConfig:
    return ExperimentConfig(
        SynthBenchConfig(tasks=default_tasks()),
        TrainConfig(),
        seeds=[0],
        variants=[
            Variant("no_curriculum", {"curriculum": False}),
            Variant("no_sparsity", {"use_sparsity": False}),
            Variant("no_sharing", {"use_sharing": False}),
            Variant("random1", baseline="random1"),
            Variant("random2", baseline="random2"),
        ],
    )


def _sparsity_sweep() -> ExperimentConfig:
    cfg = _default()
    cfg.variants = [Variant(f"sparsity_{w:g}", {"sparsity_weight": w}) for w in (0.0, 0.05, 0.5)]
    return cfg


def _smoke() -> ExperimentConfig:
    """Seconds-scale plan for tests and trying the CLI."""
    tasks = [
        SynthTask("A", "shared_trunk", "regression", out_dim=2),
        SynthTask("B", "shared_trunk", "classification", out_dim=3),
        SynthTask("C", "independent_trunk", "cosine_target", out_dim=3),
    ]
    bench = SynthBenchConfig(input_dim=8, trunk_width=16, n_train=256, n_val=64, n_test=64,
                             generator_width=8, tasks=tasks)
    train = TrainConfig(total_policy_iters=40, retrain_iters=30, batch_size=32, sample_count=2, eval_every=10,
                        block_count=3, width=16, block_hidden=8)
    return ExperimentConfig(bench, train, [0], [Variant("no_curriculum", {"curriculum": False}),
                                                Variant("random1", baseline="random1")])


PRESETS = {
    "preset_default": _default,
    "preset_sparsity_sweep": _sparsity_sweep,
    "preset_smoke": _smoke,
}


def load_config(source: str | Path) -> ExperimentConfig:
    """A preset name or a path to a JSON file; missing fields take their defaults."""
    if str(source) in PRESETS:
        return PRESETS[str(source)]()
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {source}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return ExperimentConfig.from_dict(d)
