"""Two-phase pipeline: policy learning, then sample-and-retrain."""

from __future__ import annotations

import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import MetricsReport, metric_suite, overall_performance, relative_performance
from .network import (
    MultiTaskNetwork,
    RetrainNetwork,
    count_flops,
    forward_shared,
    forward_soft_all,
    used_parameter_count,
)
from .objectives import LossWeights, task_loss, total_loss
from .optim import SGD, Adam
from .policy import (
    AnnealSchedule,
    DecisionMatrix,
    PolicyLogits,
    all_open,
    curriculum_mask,
    gumbel_noise,
    random_policy,
    sample_policies,
    soft_decision_tensor,
    temperature,
)
from .synth import MultiTaskDataset, Split


@dataclass
class TrainConfig:
    total_policy_iters: int = 2000
    retrain_iters: int = 2000
    warmup_fraction: float = 0.2
    weight_lr: float = 0.01
    policy_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    tau_start: float = 5.0
    tau_min: float = 0.5
    sparsity_weight: float = 0.0015
    sharing_weight: float = 0.0005
    sample_count: int = 8
    eval_every: int = 50
    block_count: int = 8
    width: int = 64
    block_hidden: int = 16
    seed: int = 0
    curriculum: bool = True
    use_sparsity: bool = True
    use_sharing: bool = True

    def __post_init__(self):
        if self.total_policy_iters < 1 or self.retrain_iters < 1:
            raise ValueError("iteration budgets must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.weight_lr <= 0 or self.policy_lr <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def warmup_iters(self) -> int:
        return int(round(self.warmup_fraction * self.total_policy_iters))

    @property
    def policy_iters(self) -> int:
        return self.total_policy_iters - self.warmup_iters

    def anneal(self) -> AnnealSchedule:
        return AnnealSchedule(self.tau_start, self.tau_min, max(self.policy_iters - 1, 1))

    def loss_weights(self, tasks) -> LossWeights:
        return LossWeights(
            tuple(t.loss_weight for t in tasks),
            self.sparsity_weight if self.use_sparsity else 0.0,
            self.sharing_weight if self.use_sharing else 0.0,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(seed: int, stream: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode()), index])
    return int(ss.generate_state(1)[0])


def _rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stream, index))


@dataclass
class SplitPair:
    split_W: np.ndarray
    split_P: np.ndarray


def make_splits(n: int, seed: int) -> SplitPair:
    perm = _rng(seed, "splits").permutation(n)
    half = n // 2
    return SplitPair(np.sort(perm[:half]), np.sort(perm[half:]))


class Batcher:
    """Shuffled minibatches over an index pool; ``epoch`` counts completed passes."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(indices) == 0:
            raise ValueError("empty dataset")
        self.indices = np.asarray(indices)
        self.batch_size = min(batch_size, len(self.indices))
        self.rng = rng
        self.epoch = 0
        self._order = self.rng.permutation(self.indices)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self.epoch += 1
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def _task_losses(tasks, preds, split: Split, idx) -> list[Tensor]:
    return [task_loss(t.loss_kind, p, y[idx]) for t, p, y in zip(tasks, preds, split.targets)]


# phase 1 --------------------------------------------------------------------


@dataclass
class PolicyTrace:
    temperatures: list[float] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    open_counts: list[int] = field(default_factory=list)
    weight_losses: list[float] = field(default_factory=list)
    policy_losses: list[float] = field(default_factory=list)
    logit_grads: list[np.ndarray] = field(default_factory=list)


def warmup(net: MultiTaskNetwork, config: TrainConfig, data: MultiTaskDataset,
           optimizer: SGD | None = None) -> list[float]:
    """Hard-sharing weight training for ``config.warmup_iters`` steps; returns the losses."""
    train = data.train
    if len(train) == 0:
        raise ValueError("empty dataset")
    opt = optimizer or SGD(net.parameters(), config.weight_lr, config.momentum)
    weights = config.loss_weights(net.tasks)
    batches = Batcher(np.arange(len(train)), config.batch_size, _rng(config.seed, "warmup-batches"))
    net.set_requires_grad(True)
    losses = []
    for _ in range(config.warmup_iters):
        idx = batches.next()
        preds = forward_shared(net, train.x[idx])
        loss = total_loss(_task_losses(net.tasks, preds, train, idx), None, weights)
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


def _gates(raw: Tensor, noise: np.ndarray, tau: float, open_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Masked raw logits and the (L, K) select-weight matrix; closed blocks always execute."""
    col = open_mask.astype(np.float64).reshape(-1, 1)
    raw_m = ad.mask_grad(raw, col)
    v = soft_decision_tensor(raw_m, noise, tau)
    sel = ad.take(v, (Ellipsis, 1))
    return raw_m, ad.add(ad.mul(sel, col), 1.0 - col)


def policy_phase(net: MultiTaskNetwork, logits: PolicyLogits, config: TrainConfig, data: MultiTaskDataset,
                 splits: SplitPair, weight_opt: SGD | None = None, trace: PolicyTrace | None = None,
                 record_grads: bool = False) -> PolicyLogits:
    """Alternate one SGD weight step (split_W) with one Adam policy step (split_P)."""
    train, tasks = data.train, net.tasks
    L = net.block_count
    weights = config.loss_weights(tasks)
    schedule = config.anneal()
    weight_opt = weight_opt or SGD(net.parameters(), config.weight_lr, config.momentum)
    raw = Tensor(logits.raw, requires_grad=True, name="policy")
    policy_opt = Adam([raw], config.policy_lr)
    w_batches = Batcher(splits.split_W, config.batch_size, _rng(config.seed, "weight-batches"))
    p_batches = Batcher(splits.split_P, config.batch_size, _rng(config.seed, "policy-batches"))
    noise_rng = _rng(config.seed, "gumbel")
    shape = (L, net.task_count, 2)

    for t in range(config.policy_iters):
        tau = temperature(schedule, min(t, schedule.total_steps))
        # epoch 1 is the first pass over split_P after warm-up
        epoch = p_batches.epoch + 1
        state = curriculum_mask(epoch, L) if config.curriculum else all_open(L)
        open_mask = state.mask()

        # (a) weights
        net.set_requires_grad(True)
        raw.requires_grad = False
        idx = w_batches.next()
        _, gates = _gates(raw, gumbel_noise(noise_rng, shape), tau, open_mask)
        preds = forward_soft_all(net, train.x[idx], gates)
        loss = total_loss(_task_losses(tasks, preds, train, idx), None, weights)
        ad.backward(loss)
        weight_opt.step()

        # (b) policy
        net.set_requires_grad(False)
        raw.requires_grad = True
        idx = p_batches.next()
        raw_m, gates = _gates(raw, gumbel_noise(noise_rng, shape), tau, open_mask)
        preds = forward_soft_all(net, train.x[idx], gates)
        ploss = total_loss(_task_losses(tasks, preds, train, idx), raw_m, weights)
        ad.backward(ploss)
        if record_grads and trace is not None:
            trace.logit_grads.append(raw.grad.copy())
        policy_opt.step()

        if trace is not None:
            trace.temperatures.append(tau)
            trace.epochs.append(epoch)
            trace.open_counts.append(int(open_mask.sum()))
            trace.weight_losses.append(loss.item())
            trace.policy_losses.append(ploss.item())

    net.set_requires_grad(True)
    return PolicyLogits(raw.data.copy())


@dataclass
class PolicyResult:
    net: MultiTaskNetwork
    logits: PolicyLogits
    trace: PolicyTrace
    warmup_losses: list[float]
    splits: SplitPair


def learn_policy(config: TrainConfig, data: MultiTaskDataset, record_grads: bool = False) -> PolicyResult:
    n_in = data.train.x.shape[1]
    net = MultiTaskNetwork(n_in, config.width, config.block_count, data.tasks, derive_seed(config.seed, "init"),
                           config.block_hidden)
    logits = PolicyLogits.zeros(config.block_count, len(data.tasks))
    opt = SGD(net.parameters(), config.weight_lr, config.momentum)
    wl = warmup(net, config, data, opt)
    splits = make_splits(len(data.train), config.seed)
    trace = PolicyTrace()
    logits = policy_phase(net, logits, config, data, splits, opt, trace, record_grads)
    return PolicyResult(net, logits, trace, wl, splits)


# phase 2 --------------------------------------------------------------------


@dataclass
class RetrainResult:
    val: MetricsReport
    test: MetricsReport
    best_iter: int
    val_losses: list[float]
    net: MultiTaskNetwork | None = None


def _evaluate(forward, tasks, split: Split, weights: LossWeights) -> tuple[dict, float]:
    with ad.no_grad():
        preds = forward(split.x)
        loss = sum(lam * task_loss(t.loss_kind, p, y).item()
                   for lam, t, p, y in zip(weights.task_weights, tasks, preds, split.targets))
    metrics = {t.name: metric_suite(t.loss_kind, p.data, y) for t, p, y in zip(tasks, preds, split.targets)}
    return metrics, loss


def _forward_prefix_cached(rnet: RetrainNetwork, x) -> list[Tensor]:
    """Task paths sharing a prefix of executed blocks reuse its activations."""
    x = ad.as_tensor(x)
    net = rnet.net
    cache: dict[tuple[int, ...], Tensor] = {(): net.stem(x)}
    outs = []
    for k, path in enumerate(rnet.paths):
        key: tuple[int, ...] = ()
        h = cache[key]
        for l in rnet.U.selected(k):
            key = key + (l,)
            if key not in cache:
                cache[key] = ad.add(h, net.blocks[l].transform(h))
            h = cache[key]
        outs.append(path.head(h))
    return outs


def retrain(template: MultiTaskNetwork, U: DecisionMatrix, config: TrainConfig, data: MultiTaskDataset,
            seed: int) -> RetrainResult:
    """Train a fresh network under fixed decisions; keep the best validation checkpoint."""
    rnet = RetrainNetwork(template, U, seed)
    tasks = template.tasks
    params = rnet.parameters()
    opt = SGD(params, config.weight_lr, config.momentum)
    weights = LossWeights(tuple(t.loss_weight for t in tasks))
    train = data.train
    batches = Batcher(np.arange(len(train)), config.batch_size, np.random.default_rng(derive_seed(seed, "batches")))
    forward = lambda x: _forward_prefix_cached(rnet, x)  # noqa: E731

    best_loss, best_iter, best_state = np.inf, 0, None
    val_losses = []
    for it in range(1, config.retrain_iters + 1):
        idx = batches.next()
        loss = total_loss(_task_losses(tasks, forward(train.x[idx]), train, idx), None, weights)
        ad.backward(loss)
        opt.step()
        if it % config.eval_every == 0 or it == config.retrain_iters:
            _, vl = _evaluate(forward, tasks, data.val, weights)
            val_losses.append(vl)
            if vl < best_loss:
                best_loss, best_iter = vl, it
                best_state = [p.data.copy() for p in params]
    for p, d in zip(params, best_state):
        p.data = d

    n_params = used_parameter_count(rnet.net, U)
    flops = sum(count_flops(rnet.net, U, k) for k in range(len(tasks)))
    val_m, _ = _evaluate(forward, tasks, data.val, weights)
    test_m, _ = _evaluate(forward, tasks, data.test, weights)
    return RetrainResult(
        MetricsReport(val_m, params=n_params, flops=flops),
        MetricsReport(test_m, params=n_params, flops=flops),
        best_iter,
        val_losses,
        rnet.net,
    )


@dataclass
class Reference:
    """Single-task metrics per split, the denominator of every relative score."""

    val: dict
    test: dict


def delta_overall(report: MetricsReport, reference_split: dict) -> float:
    return overall_performance(
        relative_performance(m, reference_split[name]) for name, m in report.per_task.items()
    )


@dataclass
class RunArtifacts:
    learned_logits: PolicyLogits
    sampled_decisions: list[DecisionMatrix]
    retrain_results: list[RetrainResult]
    best_index: int
    val_deltas: list[float] = field(default_factory=list)


def _retrain_job(args):
    template, U, config, data, seed = args
    return retrain(template, U, config, data, seed)


def retrain_many(template, decisions, config, data, seeds, workers: int = 1) -> list[RetrainResult]:
    jobs = [(template, U, config, data, s) for U, s in zip(decisions, seeds)]
    if workers <= 1 or len(jobs) <= 1:
        return [_retrain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_retrain_job, jobs))


def _select_best(decisions, results, reference: Reference, logits) -> RunArtifacts:
    for r in results:
        r.val.compute_deltas(reference.val)
        r.test.compute_deltas(reference.test)
    deltas = [r.val.delta_overall for r in results]
    best = int(np.argmax(deltas))  # first maximum on ties
    return RunArtifacts(logits, decisions, results, best, deltas)


def retrain_seeds(config: TrainConfig, n: int) -> list[int]:
    return [derive_seed(config.seed, "retrain", i) for i in range(n)]


def sample_and_retrain(net_template: MultiTaskNetwork, logits: PolicyLogits, config: TrainConfig,
                       data: MultiTaskDataset, reference: Reference, workers: int = 1) -> RunArtifacts:
    decisions = sample_policies(logits, config.sample_count, derive_seed(config.seed, "sample"))
    results = retrain_many(net_template, decisions, config, data, retrain_seeds(config, len(decisions)), workers)
    return _select_best(decisions, results, reference, logits)


def _template(config: TrainConfig, data: MultiTaskDataset) -> MultiTaskNetwork:
    return MultiTaskNetwork(data.train.x.shape[1], config.width, config.block_count, data.tasks, 0,
                            config.block_hidden)


def run_adashare(config: TrainConfig, data: MultiTaskDataset, reference: Reference,
                 workers: int = 1) -> tuple[PolicyResult, RunArtifacts]:
    policy = learn_policy(config, data)
    artifacts = sample_and_retrain(policy.net, policy.logits, config, data, reference, workers)
    return policy, artifacts


BASELINES = ("single_task", "hard_sharing", "random1", "random2")


@dataclass
class BaselineResult:
    val: MetricsReport
    test: MetricsReport
    decisions: list[DecisionMatrix] = field(default_factory=list)
    best_index: int = 0


def run_baseline(kind: str, config: TrainConfig, data: MultiTaskDataset,
                 reference_decision: DecisionMatrix | None = None, reference: Reference | None = None,
                 workers: int = 1) -> BaselineResult:
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    template = _template(config, data)
    L, K = config.block_count, len(data.tasks)

    if kind == "single_task":
        val, test = {}, {}
        params = flops = 0
        for k, task in enumerate(data.tasks):
            sub = MultiTaskDataset(
                *(Split(s.x, [s.targets[k]]) for s in (data.train, data.val, data.test)), tasks=[task]
            )
            single = MultiTaskNetwork(template.input_dim, config.width, L, [task], 0, config.block_hidden)
            r = retrain(single, DecisionMatrix.ones(L, 1), config, sub, derive_seed(config.seed, "single", k))
            val.update(r.val.per_task)
            test.update(r.test.per_task)
            params += r.test.params
            flops += r.test.flops
        ref = Reference(val, test)
        v = MetricsReport(val, params=params, flops=flops)
        t = MetricsReport(test, params=params, flops=flops)
        v.compute_deltas(ref.val)
        t.compute_deltas(ref.test)
        return BaselineResult(v, t, [DecisionMatrix.ones(L, K)])

    if kind == "hard_sharing":
        U = DecisionMatrix.ones(L, K)
        r = retrain(template, U, config, data, retrain_seeds(config, 1)[0])
        if reference is not None:
            r.val.compute_deltas(reference.val)
            r.test.compute_deltas(reference.test)
        return BaselineResult(r.val, r.test, [U])

    if reference_decision is None:
        raise ValueError(f"{kind} baseline needs a reference decision matrix")
    if reference is None:
        raise ValueError(f"{kind} baseline needs single-task reference metrics")
    mode = "match_total" if kind == "random1" else "match_per_task"
    decisions = [
        random_policy(mode, reference_decision, derive_seed(config.seed, kind, i)) for i in range(config.sample_count)
    ]
    results = retrain_many(template, decisions, config, data, retrain_seeds(config, len(decisions)), workers)
    art = _select_best(decisions, results, reference, None)
    best = results[art.best_index]
    return BaselineResult(best.val, best.test, decisions, art.best_index)


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **overrides)
