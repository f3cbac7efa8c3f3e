"""Shared residual trunk with per-task affine heads."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .policy import DecisionMatrix, PolicyLogits, SoftDecision

LOSS_KINDS = ("cross_entropy", "l1", "cosine")


@dataclass
class TaskSpec:
    name: str
    loss_kind: str
    out_dim: int
    loss_weight: float = 1.0
    metrics: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_weight <= 0:
            raise ValueError("task loss weight must be positive")
        if self.out_dim < 1:
            raise ValueError("out_dim must be positive")
        if not self.metrics:
            from .evaluation import default_metrics

            self.metrics = default_metrics(self.loss_kind)


def _param(rng, shape, std, name):
    data = rng.standard_normal(shape) * std if std else np.zeros(shape)
    return Tensor(data, requires_grad=True, name=name)


class Affine:
    def __init__(self, rng, n_in, n_out, std, name):
        self.W = _param(rng, (n_in, n_out), std, f"{name}.W")
        self.b = _param(rng, (n_out,), 0.0, f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise ShapeError(self.W.name[:-2], f"input width {self.W.shape[0]}", x.shape)
        return ad.add(ad.matmul(x, self.W), self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    @property
    def macs(self) -> int:
        return self.W.shape[0] * self.W.shape[1]


class ResidualBlock:
    """``F(h) = relu(h W1 + b1) W2 + b2``; width in == width out."""

    def __init__(self, rng, width: int, name: str, hidden: int | None = None, out_scale: float = 0.25):
        hidden = hidden or width
        self.width = width
        self.fc1 = Affine(rng, width, hidden, np.sqrt(2.0 / width), f"{name}.fc1")
        self.fc2 = Affine(rng, hidden, width, out_scale / np.sqrt(hidden), f"{name}.fc2")

    def transform(self, h: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(h)))

    def parameters(self) -> list[Tensor]:
        return self.fc1.parameters() + self.fc2.parameters()

    @property
    def macs(self) -> int:
        return self.fc1.macs + self.fc2.macs


class MultiTaskNetwork:
    def __init__(self, input_dim: int, width: int, block_count: int, tasks: list[TaskSpec], seed: int = 0,
                 hidden: int | None = None):
        self.input_dim = input_dim
        self.width = width
        self.hidden = hidden or width
        self.block_count = block_count
        self.tasks = list(tasks)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.stem = Affine(rng, input_dim, width, np.sqrt(2.0 / input_dim), "stem")
        self.blocks = [ResidualBlock(rng, width, f"blocks.{l}", self.hidden) for l in range(block_count)]
        self.heads = [Affine(rng, width, t.out_dim, 0.5 / np.sqrt(width), f"heads.{t.name}") for t in self.tasks]

    @property
    def task_count(self) -> int:
        return len(self.tasks)

    def fresh(self, seed: int) -> "MultiTaskNetwork":
        return MultiTaskNetwork(self.input_dim, self.width, self.block_count, self.tasks, seed, self.hidden)

    def trunk_parameters(self) -> list[Tensor]:
        out = self.stem.parameters()
        for b in self.blocks:
            out += b.parameters()
        return out

    def parameters(self) -> list[Tensor]:
        out = self.trunk_parameters()
        for h in self.heads:
            out += h.parameters()
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError("network input", f"(batch, {self.input_dim})", x.shape)


def _gate_matrix(net: MultiTaskNetwork, v) -> Tensor:
    """Select weights ``v(1)`` as an (L, K) tensor."""
    if isinstance(v, SoftDecision):
        v = v.tensor if v.tensor is not None else Tensor(v.v)
    v = ad.as_tensor(v)
    if v.data.ndim == 3:
        v = ad.take(v, (Ellipsis, 1))
    if v.shape != (net.block_count, net.task_count):
        raise ShapeError("decision", (net.block_count, net.task_count), v.shape)
    return v


def forward_soft(net: MultiTaskNetwork, x, k: int, v) -> Tensor:
    """``h_l = h_{l-1} + v_{l,k}(1) * F_l(h_{l-1})`` then head k."""
    x = ad.as_tensor(x)
    net._check_input(x)
    gates = _gate_matrix(net, v)
    h = net.stem(x)
    for l, block in enumerate(net.blocks):
        h = ad.add(h, ad.mul(ad.take(gates, (l, k)), block.transform(h)))
    return net.heads[k](h)


def forward_soft_all(net: MultiTaskNetwork, x, v) -> list[Tensor]:
    """All task predictions in one pass by stacking task copies along the batch.

    Equivalent to calling :func:`forward_soft` per task, with one matmul per
    layer instead of K.
    """
    x = ad.as_tensor(x)
    net._check_input(x)
    gates = _gate_matrix(net, v)
    B, K = x.shape[0], net.task_count
    expand = np.kron(np.eye(K), np.ones((B, 1)))  # (K*B, K)
    h0 = net.stem(x)
    h = ad.concat([h0] * K, axis=0) if K > 1 else h0
    for l, block in enumerate(net.blocks):
        g = ad.matmul(expand, ad.reshape(ad.take(gates, l), (K, 1)))
        h = ad.add(h, ad.mul(g, block.transform(h)))
    return [net.heads[k](ad.take(h, slice(k * B, (k + 1) * B))) for k in range(K)]


def forward_hard(net: MultiTaskNetwork, x, k: int, U: DecisionMatrix) -> Tensor:
    """Skipped blocks are not evaluated at all."""
    x = ad.as_tensor(x)
    net._check_input(x)
    if U.shape != (net.block_count, net.task_count):
        raise ShapeError("decision", (net.block_count, net.task_count), U.shape)
    h = net.stem(x)
    for l, block in enumerate(net.blocks):
        if U.u[l, k]:
            h = ad.add(h, block.transform(h))
    return net.heads[k](h)


def forward_shared(net: MultiTaskNetwork, x) -> list[Tensor]:
    """Hard sharing: every block executed for every task, trunk computed once."""
    x = ad.as_tensor(x)
    net._check_input(x)
    h = net.stem(x)
    for block in net.blocks:
        h = ad.add(h, block.transform(h))
    return [head(h) for head in net.heads]


def count_parameters(net: MultiTaskNetwork, logits: PolicyLogits | None = None) -> dict[str, int]:
    trunk = sum(p.size for p in net.trunk_parameters())
    heads = [sum(p.size for p in h.parameters()) for h in net.heads]
    L = net.block_count
    policy = logits.n_params if logits is not None else L * net.task_count
    return {
        "network_params": trunk + sum(heads),
        "trunk_params": trunk,
        "policy_params": policy,
        "per_task_marginal": L + (heads[-1] if heads else 0),
    }


def count_flops(net: MultiTaskNetwork, U: DecisionMatrix, k: int) -> int:
    """Multiply-accumulates per input sample along task k's path (matmuls only)."""
    executed = sum(b.macs for l, b in enumerate(net.blocks) if U.u[l, k])
    return net.stem.macs + executed + net.heads[k].macs


def used_parameter_count(net: MultiTaskNetwork, U: DecisionMatrix) -> int:
    used = U.u.any(axis=1)
    n = sum(p.size for p in net.stem.parameters())
    n += sum(p.size for l, b in enumerate(net.blocks) if used[l] for p in b.parameters())
    n += sum(p.size for h in net.heads for p in h.parameters())
    return n


class TaskPath:
    """Single-task view of a joint network: only the selected blocks, in order."""

    def __init__(self, net: MultiTaskNetwork, U: DecisionMatrix, k: int):
        self.net = net
        self.k = k
        self.blocks = [net.blocks[l] for l in U.selected(k)]
        self.head = net.heads[k]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        self.net._check_input(x)
        h = self.net.stem(x)
        for block in self.blocks:
            h = ad.add(h, block.transform(h))
        return self.head(h)

    def parameters(self) -> list[Tensor]:
        out = self.net.stem.parameters()
        for b in self.blocks:
            out += b.parameters()
        return out + self.head.parameters()


class RetrainNetwork:
    """Freshly initialised joint network executing a fixed decision matrix."""

    def __init__(self, template: MultiTaskNetwork, U: DecisionMatrix, seed: int):
        if U.shape != (template.block_count, template.task_count):
            raise ShapeError("decision", (template.block_count, template.task_count), U.shape)
        self.net = template.fresh(seed)
        self.U = U
        self.paths = [TaskPath(self.net, U, k) for k in range(template.task_count)]

    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for path in self.paths:
            for p in path.parameters():
                seen.setdefault(id(p), p)
        return list(seen.values())

    def forward_all(self, x) -> list[Tensor]:
        return [path(x) for path in self.paths]


def build_subnetwork(net_template: MultiTaskNetwork, U: DecisionMatrix, k: int, seed: int = 0) -> TaskPath:
    return RetrainNetwork(net_template, U, seed).paths[k]


# checkpoints ----------------------------------------------------------------

CKPT_MAGIC = "adashare-ckpt-v1"


def save_checkpoint(net: MultiTaskNetwork, path) -> None:
    named = net.named_parameters()
    header = CKPT_MAGIC + " " + json.dumps([[n, list(p.shape)] for n, p in named], separators=(",", ":"))
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    Path(path).write_bytes(header.encode("utf-8") + b"\n" + payload)


def load_checkpoint(net: MultiTaskNetwork, path) -> None:
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    magic, _, spec = blob[:nl].decode("utf-8").partition(" ")
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    entries = json.loads(spec)
    params = dict(net.named_parameters())
    offset = nl + 1
    for name, shape in entries:
        if name not in params or list(params[name].shape) != shape:
            raise ValueError(f"{path}: parameter {name} {shape} does not match network")
        n = int(np.prod(shape)) * 8
        params[name].data = np.frombuffer(blob[offset:offset + n], dtype="<f8").reshape(shape).astype(np.float64)
        offset += n
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after parameters")
