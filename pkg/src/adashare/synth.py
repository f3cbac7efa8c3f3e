"""Synthetic multi-task benchmarks with planted sharing structure.

Tasks in the ``shared_trunk`` family read out one random generator network;
``independent_trunk`` tasks read out a second, unrelated one.  Every task is
a fixed random map of its generator's features, so tasks within a family are
related and tasks across families are not.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .network import TaskSpec

FAMILIES = ("shared_trunk", "independent_trunk")
KINDS = {"classification": "cross_entropy", "regression": "l1", "cosine_target": "cosine"}


@dataclass
class SynthTask:
    name: str
    family: str
    kind: str
    out_dim: int = 4
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")

    def spec(self) -> TaskSpec:
        return TaskSpec(self.name, KINDS[self.kind], self.out_dim, self.loss_weight)


@dataclass
class SynthBenchConfig:
    input_dim: int = 32
    trunk_width: int = 64
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000
    noise_std: float = 0.1
    generator_width: int = 16
    generator_depth: int = 1
    task_similarity: float = 0.9
    tasks: list[SynthTask] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.tasks = [t if isinstance(t, SynthTask) else SynthTask(**t) for t in self.tasks]
        if len(self.tasks) < 2:
            raise ValueError("a benchmark needs at least two tasks")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError("task names must be unique")
        if not 0.0 <= self.task_similarity <= 1.0:
            raise ValueError("task_similarity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def task_specs(self) -> list[TaskSpec]:
        return [t.spec() for t in self.tasks]


@dataclass
class Split:
    x: np.ndarray
    targets: list[np.ndarray]

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Split":
        return Split(self.x[idx], [t[idx] for t in self.targets])


@dataclass
class MultiTaskDataset:
    train: Split
    val: Split
    test: Split
    tasks: list[TaskSpec]


class _Generator:
    def __init__(self, rng, input_dim, width, depth):
        dims = [input_dim] + [width] * depth
        self.layers = [
            (rng.standard_normal((a, b)) * np.sqrt(2.0 / a), rng.standard_normal(b) * 0.1)
            for a, b in zip(dims[:-1], dims[1:])
        ]

    def __call__(self, x):
        h = x
        for W, b in self.layers:
            h = np.maximum(h @ W + b, 0.0)
        return h


class PlantedBenchmark:
    """The fixed random maps behind a :class:`SynthBenchConfig`."""

    def __init__(self, cfg: SynthBenchConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.generators = {
            fam: _Generator(rng, cfg.input_dim, cfg.generator_width, cfg.generator_depth) for fam in FAMILIES
        }
        calib = rng.standard_normal((4096, cfg.input_dim))
        out_max = max(t.out_dim for t in cfg.tasks)
        base = {fam: rng.standard_normal((cfg.generator_width, out_max)) for fam in FAMILIES}
        s = cfg.task_similarity
        self.readouts = []
        for t in cfg.tasks:
            # within a family, readouts share a common random component
            own = rng.standard_normal((cfg.generator_width, t.out_dim))
            A = (np.sqrt(s) * base[t.family][:, :t.out_dim] + np.sqrt(1 - s) * own) / np.sqrt(cfg.generator_width)
            z = self.generators[t.family](calib) @ A
            mu, sd = z.mean(axis=0), z.std(axis=0)
            self.readouts.append((A, mu, sd))
        self._rng = rng

    def latent(self, k: int, x: np.ndarray) -> np.ndarray:
        """Standardized noise-free readout of task k."""
        task = self.cfg.tasks[k]
        A, mu, sd = self.readouts[k]
        return (self.generators[task.family](x) @ A - mu) / sd

    def targets(self, k: int, x: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
        z = self.latent(k, x)
        if noise is not None:
            z = z + noise
        kind = self.cfg.tasks[k].kind
        if kind == "classification":
            return np.argmax(z, axis=1).astype(np.int64)
        if kind == "cosine_target":
            n = np.linalg.norm(z, axis=1, keepdims=True)
            return z / np.where(n == 0, 1.0, n)
        return z

    def draw_split(self, n: int) -> Split:
        rng = self._rng
        x = rng.standard_normal((n, self.cfg.input_dim))
        targets = []
        for k, t in enumerate(self.cfg.tasks):
            noise = rng.standard_normal((n, t.out_dim)) * self.cfg.noise_std if self.cfg.noise_std else None
            targets.append(self.targets(k, x, noise))
        return Split(x, targets)


def generate_synthetic(cfg: SynthBenchConfig) -> MultiTaskDataset:
    bench = PlantedBenchmark(cfg)
    train = bench.draw_split(cfg.n_train)
    val = bench.draw_split(cfg.n_val)
    test = bench.draw_split(cfg.n_test)
    return MultiTaskDataset(train, val, test, cfg.task_specs())


def default_tasks() -> list[SynthTask]:
    return [
        SynthTask("A", "shared_trunk", "regression", out_dim=4),
        SynthTask("B", "shared_trunk", "regression", out_dim=4),
        SynthTask("C", "independent_trunk", "regression", out_dim=4),
    ]


def save_dataset(ds: MultiTaskDataset, path) -> None:
    arrays = {}
    for split in ("train", "val", "test"):
        s = getattr(ds, split)
        arrays[f"{split}.x"] = s.x
        for t, y in zip(ds.tasks, s.targets):
            arrays[f"{split}.{t.name}"] = y
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
