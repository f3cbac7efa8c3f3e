"""Select-or-skip policy: logits, Gumbel sampling, relaxations, schedules.

Blocks and tasks are 0-indexed everywhere; block 0 is nearest the input.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PI_FLOOR = 1e-6
UNIFORM_FLOOR = 1e-12


def logistic(x):
    return ad._logistic(np.asarray(x, dtype=np.float64))


@dataclass
class PolicyLogits:
    """One unconstrained logit per (block, task); ``alpha = logistic(raw)``."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 2 or 0 in self.raw.shape:
            raise ValueError(f"policy logits must be a non-empty L x K matrix, got {self.raw.shape}")

    @classmethod
    def zeros(cls, block_count: int, task_count: int) -> "PolicyLogits":
        return cls(np.zeros((block_count, task_count)))

    @property
    def block_count(self) -> int:
        return self.raw.shape[0]

    @property
    def task_count(self) -> int:
        return self.raw.shape[1]

    @property
    def n_params(self) -> int:
        return self.raw.size

    def alpha(self) -> np.ndarray:
        return logistic(self.raw)

    def copy(self) -> "PolicyLogits":
        return PolicyLogits(self.raw.copy())

    def with_task_added(self) -> "PolicyLogits":
        return PolicyLogits(np.hstack([self.raw, np.zeros((self.block_count, 1))]))


def execute_probability(logits: PolicyLogits, l: int, k: int) -> float:
    if not (0 <= l < logits.block_count and 0 <= k < logits.task_count):
        raise IndexError(f"(block {l}, task {k}) outside {logits.raw.shape}")
    return float(logistic(logits.raw[l, k]))


@dataclass
class GumbelDraw:
    noise: np.ndarray  # (L, K, 2); [..., 0] skip, [..., 1] select
    rng_seed: int | None = None


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), UNIFORM_FLOOR, 1.0 - UNIFORM_FLOOR)
    return gumbel_from_uniform(u)


def draw_gumbel(L: int, K: int, seed: int) -> GumbelDraw:
    return GumbelDraw(gumbel_noise(np.random.default_rng(seed), (L, K, 2)), seed)


def log_pi(alpha):
    """``log [1 - alpha, alpha]`` stacked on a trailing axis, clamped away from 0 and 1."""
    if isinstance(alpha, Tensor):
        pi = ad.stack_last([1.0 - alpha, alpha])
        return ad.log(ad.clip(pi, PI_FLOOR, 1.0 - PI_FLOOR))
    pi = np.stack([1.0 - alpha, alpha], axis=-1)
    return np.log(np.clip(pi, PI_FLOOR, 1.0 - PI_FLOOR))


@dataclass
class SoftDecision:
    v: np.ndarray
    temperature: float
    tensor: Tensor | None = field(default=None, repr=False)

    @property
    def select(self) -> np.ndarray:
        return self.v[..., 1]


def soft_decision_tensor(raw: Tensor, noise: np.ndarray, tau: float) -> Tensor:
    """Differentiable relaxed decision ``v`` of shape (L, K, 2) from raw logits."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    lp = log_pi(ad.sigmoid(raw))
    return ad.softmax((lp + noise) * (1.0 / tau))


def soft_decision(logits: PolicyLogits, draw: GumbelDraw, tau: float) -> SoftDecision:
    t = soft_decision_tensor(Tensor(logits.raw), draw.noise, tau)
    return SoftDecision(t.data, tau, t)


@dataclass
class DecisionMatrix:
    u: np.ndarray
    provenance: str = "manual"

    PROVENANCES = ("sampled", "argmax", "manual", "random_baseline")

    def __post_init__(self):
        u = np.asarray(self.u)
        if not np.isin(u, (0, 1)).all():
            raise ValueError("decision entries must be 0 or 1")
        self.u = u.astype(np.int64)
        if self.provenance not in self.PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @classmethod
    def ones(cls, L: int, K: int) -> "DecisionMatrix":
        return cls(np.ones((L, K), dtype=np.int64), "manual")

    @property
    def shape(self):
        return self.u.shape

    def selected(self, k: int) -> list[int]:
        return [int(l) for l in np.flatnonzero(self.u[:, k])]

    def to_list(self) -> list[list[int]]:
        return self.u.tolist()

    def __eq__(self, other):
        return isinstance(other, DecisionMatrix) and np.array_equal(self.u, other.u)


def hard_decision(logits: PolicyLogits, draw: GumbelDraw) -> DecisionMatrix:
    score = log_pi(logits.alpha()) + draw.noise
    u = (score[..., 1] >= score[..., 0]).astype(np.int64)
    return DecisionMatrix(u, "sampled")


def argmax_decision(logits: PolicyLogits) -> DecisionMatrix:
    return DecisionMatrix((logits.raw >= 0).astype(np.int64), "argmax")


@dataclass(frozen=True)
class AnnealSchedule:
    tau_start: float = 5.0
    tau_min: float = 0.5
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 < self.tau_min <= self.tau_start:
            raise ValueError("need 0 < tau_min <= tau_start")


def temperature(schedule: AnnealSchedule, t: int) -> float:
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    frac = t / schedule.total_steps
    return schedule.tau_start + (schedule.tau_min - schedule.tau_start) * frac


@dataclass(frozen=True)
class CurriculumState:
    epoch: int
    open_blocks: frozenset[int]
    block_count: int

    def mask(self) -> np.ndarray:
        m = np.zeros(self.block_count, dtype=bool)
        m[list(self.open_blocks)] = True
        return m


def curriculum_mask(epoch: int, L: int) -> CurriculumState:
    """Epoch 0 is warm-up (nothing open); epoch e opens the last ``min(e, L)`` blocks."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    n = min(epoch, L)
    return CurriculumState(epoch, frozenset(range(L - n, L)), L)


def all_open(L: int) -> CurriculumState:
    return CurriculumState(L, frozenset(range(L)), L)


def sample_policies(logits: PolicyLogits, n: int, seed: int) -> list[DecisionMatrix]:
    if n < 1:
        raise ValueError("need at least one sample")
    L, K = logits.raw.shape
    return [hard_decision(logits, draw_gumbel(L, K, seed + i)) for i in range(n)]


def random_policy(mode: str, reference: DecisionMatrix, seed: int) -> DecisionMatrix:
    """Random #1 (``match_total``) and Random #2 (``match_per_task``) ablation policies."""
    rng = np.random.default_rng(seed)
    ref = reference.u
    L, K = ref.shape
    u = np.ones_like(ref)
    if mode == "match_total":
        skips = int((ref == 0).sum())
        flat = u.reshape(-1)
        flat[rng.choice(L * K, size=skips, replace=False)] = 0
    elif mode == "match_per_task":
        for k in range(K):
            skips = int((ref[:, k] == 0).sum())
            u[rng.choice(L, size=skips, replace=False), k] = 0
    else:
        raise ValueError(f"unknown random policy mode {mode!r}")
    return DecisionMatrix(u, "random_baseline")


# export ---------------------------------------------------------------------

CSV_HEADER = ("block", "task", "logit", "alpha")


def policy_to_csv(logits: PolicyLogits, task_names: Sequence[str]) -> str:
    if len(task_names) != logits.task_count:
        raise ValueError("one task name per logit column required")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    alpha = logits.alpha()
    for l in range(logits.block_count):
        for k, name in enumerate(task_names):
            w.writerow([l, name, repr(float(logits.raw[l, k])), repr(float(alpha[l, k]))])
    return buf.getvalue()


def policy_from_csv(text: str) -> tuple[PolicyLogits, list[str]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or tuple(rows[0].keys()) != CSV_HEADER:
        raise ValueError(f"policy CSV must have header {','.join(CSV_HEADER)}")
    names: list[str] = []
    for r in rows:
        if r["task"] not in names:
            names.append(r["task"])
    L = max(int(r["block"]) for r in rows) + 1
    raw = np.full((L, len(names)), np.nan)
    for r in rows:
        raw[int(r["block"]), names.index(r["task"])] = float(r["logit"])
    if np.isnan(raw).any():
        raise ValueError("policy CSV is missing (block, task) rows")
    return PolicyLogits(raw), names
