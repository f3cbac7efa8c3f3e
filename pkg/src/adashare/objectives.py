"""Task losses, policy regularizers and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class LossWeights:
    task_weights: tuple[float, ...]
    sparsity: float = 0.0
    sharing: float = 0.0

    def __post_init__(self):
        self.task_weights = tuple(float(w) for w in self.task_weights)
        if any(w <= 0 for w in self.task_weights):
            raise ValueError("task weights must be positive")
        if self.sparsity < 0 or self.sharing < 0:
            raise ValueError("regularizer weights must be non-negative")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target)
    B, C = logits.shape
    if target.shape != (B,):
        raise ShapeError("cross_entropy", (B,), target.shape)
    if not np.issubdtype(target.dtype, np.integer):
        if not np.all(target == np.round(target)):
            raise ValueError("cross_entropy targets must be class indices")
        target = target.astype(np.int64)
    if target.min() < 0 or target.max() >= C:
        raise ValueError(f"class index outside [0, {C})")
    logp = ad.log(ad.softmax(logits))
    return ad.neg(ad.mean(ad.take(logp, (np.arange(B), target))))


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError("l1", pred.shape, target.shape)
    return ad.mean(ad.tabs(ad.sub(pred, target)))


def cosine_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """``1 - mean_b cos(pred_b, target_b)``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError("cosine", pred.shape, target.shape)
    tnorm = np.linalg.norm(target, axis=1, keepdims=True)
    if (tnorm == 0).any() or (np.linalg.norm(pred.data, axis=1) == 0).any():
        raise ValueError("cosine loss is undefined for zero-norm vectors")
    pnorm = ad.sqrt(ad.tsum(ad.mul(pred, pred), axis=1, keepdims=True))
    cos = ad.tsum(ad.mul(ad.div(pred, pnorm), target / tnorm), axis=1)
    return ad.sub(1.0, ad.mean(cos))


_TASK_LOSSES = {"cross_entropy": cross_entropy, "l1": l1_loss, "cosine": cosine_loss}


def task_loss(kind: str, prediction: Tensor, target) -> Tensor:
    try:
        fn = _TASK_LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}") from None
    return fn(prediction, target)


def _alpha(logits) -> Tensor:
    if isinstance(logits, Tensor):
        return ad.sigmoid(logits)
    return Tensor(np.asarray(getattr(logits, "alpha")()))


def sparsity_loss(logits) -> Tensor:
    """Sum of ``log alpha`` over all blocks and tasks (non-positive)."""
    return ad.tsum(ad.log(_alpha(logits)))


def sharing_weights(L: int) -> np.ndarray:
    """``(L - l) / L`` for 1-indexed block l; bottom blocks weigh most, the top block 0."""
    return (L - np.arange(1, L + 1)) / L


def sharing_loss(logits) -> Tensor:
    """Depth-weighted L1 distance between alpha columns, over unordered task pairs."""
    alpha = _alpha(logits)
    L, K = alpha.shape
    if K < 2:
        return Tensor(0.0)
    # pairwise differences via a constant (K, P) contrast matrix
    pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]
    contrast = np.zeros((K, len(pairs)))
    for j, (a, b) in enumerate(pairs):
        contrast[a, j] = 1.0
        contrast[b, j] = -1.0
    diffs = ad.tabs(ad.matmul(alpha, contrast))
    w = sharing_weights(L).reshape(L, 1)
    return ad.tsum(ad.mul(diffs, w))


def total_loss(task_losses: Sequence[Tensor], logits, weights: LossWeights) -> Tensor:
    if len(task_losses) != len(weights.task_weights):
        raise ValueError("one task loss per task weight required")
    total = None
    for lam, loss in zip(weights.task_weights, task_losses):
        term = ad.mul(lam, loss)
        total = term if total is None else ad.add(total, term)
    if logits is not None and weights.sparsity:
        total = ad.add(total, ad.mul(weights.sparsity, sparsity_loss(logits)))
    if logits is not None and weights.sharing:
        total = ad.add(total, ad.mul(weights.sharing, sharing_loss(logits)))
    return total
