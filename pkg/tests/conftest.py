import numpy as np
import pytest

from adashare.synth import SynthBenchConfig, SynthTask, generate_synthetic
from adashare.trainer import TrainConfig


def tiny_bench(seed=0, **kw) -> SynthBenchConfig:
    tasks = kw.pop("tasks", None) or [
        SynthTask("A", "shared_trunk", "regression", out_dim=2),
        SynthTask("B", "shared_trunk", "classification", out_dim=3),
        SynthTask("C", "independent_trunk", "cosine_target", out_dim=3),
    ]
    base = dict(input_dim=6, trunk_width=8, n_train=96, n_val=32, n_test=32, generator_width=6)
    base.update(kw)
    return SynthBenchConfig(tasks=tasks, seed=seed, **base)


def tiny_train(**kw) -> TrainConfig:
    base = dict(total_policy_iters=30, retrain_iters=20, batch_size=16, sample_count=2, eval_every=5,
                block_count=3, width=8, block_hidden=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_data():
    return generate_synthetic(tiny_bench())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
