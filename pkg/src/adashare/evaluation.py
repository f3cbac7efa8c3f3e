"""Per-task metrics, relative performance against single-task references,
policy correlation, and report serialization (JSON + heatmap SVG)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .policy import PolicyLogits

# (name, direction) with direction 1 when lower is better
Metric = tuple[str, float, int]

_KIND_ALIASES = {
    "classification": "cross_entropy",
    "regression": "l1",
    "cosine_target": "cosine",
}


def _canonical(kind: str) -> str:
    return _KIND_ALIASES.get(kind, kind)


def _accuracy(pred, target):
    return float(np.mean(np.argmax(pred, axis=1) == np.asarray(target)))


def _abs_err(pred, target):
    return float(np.mean(np.abs(pred - target)))


def _rel_err(pred, target):
    return float(np.sum(np.abs(pred - target)) / np.sum(np.abs(target)))


def _angles(pred, target):
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(target, axis=1)
    cos = np.sum(pred * target, axis=1) / np.maximum(pn * tn, 1e-300)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


# registry: kind -> list of (name, fn, direction)
METRICS: dict[str, list[tuple[str, Callable, int]]] = {
    "cross_entropy": [("accuracy", _accuracy, 0)],
    "l1": [("abs_err", _abs_err, 1), ("rel_err", _rel_err, 1)],
    "cosine": [
        ("mean_angle", lambda p, t: float(np.mean(_angles(p, t))), 1),
        ("median_angle", lambda p, t: float(np.median(_angles(p, t))), 1),
    ],
}


def default_metrics(kind: str) -> list[tuple[str, int]]:
    return [(name, d) for name, _, d in METRICS[_canonical(kind)]]


def metric_suite(kind: str, predictions, targets) -> list[Metric]:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets)
    kind = _canonical(kind)
    if kind not in METRICS:
        raise ValueError(f"no metrics registered for {kind!r}")
    expected = (predictions.shape[0],) if kind == "cross_entropy" else predictions.shape
    if targets.shape != expected:
        raise ValueError(f"metric shape mismatch: predictions {predictions.shape}, targets {targets.shape}")
    if kind != "cross_entropy":
        targets = targets.astype(np.float64)
    return [(name, fn(predictions, targets), d) for name, fn, d in METRICS[kind]]


def relative_performance(task_metrics: Sequence[Metric], reference_metrics: Sequence[Metric]) -> float:
    """Signed mean percentage improvement over the reference, one term per metric."""
    if len(task_metrics) != len(reference_metrics) or not task_metrics:
        raise ValueError("metric lists must be non-empty and of equal length")
    ref = {name: (value, d) for name, value, d in reference_metrics}
    total = 0.0
    for name, value, d in task_metrics:
        if name not in ref:
            raise ValueError(f"metric {name!r} missing from reference")
        rv, rd = ref[name]
        if rd != d:
            raise ValueError(f"metric {name!r} has conflicting direction flags")
        if rv == 0:
            raise ZeroDivisionError(f"reference value of {name!r} is zero")
        total += (-1) ** d * (value - rv) / rv
    return total / len(task_metrics) * 100.0


def overall_performance(deltas: Sequence[float]) -> float:
    deltas = list(deltas)
    if not deltas:
        raise ValueError("need at least one task delta")
    return float(sum(deltas) / len(deltas))


@dataclass
class CorrelationMatrix:
    values: np.ndarray


def task_correlation(logits: PolicyLogits) -> CorrelationMatrix:
    """Cosine similarity between tasks' execution-probability columns."""
    alpha = logits.alpha()
    norms = np.linalg.norm(alpha, axis=0)
    if (norms == 0).any():
        raise ValueError("zero-norm task column")
    unit = alpha / norms
    c = np.clip(unit.T @ unit, -1.0, 1.0)
    c = (c + c.T) / 2.0
    np.fill_diagonal(c, 1.0)
    return CorrelationMatrix(c)


def round_sig(x: float, digits: int = 6) -> float:
    if x == 0 or not math.isfinite(x):
        return float(x)
    return float(f"{x:.{digits - 1}e}")


def _rounded(obj):
    if isinstance(obj, float):
        return round_sig(obj)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    if isinstance(obj, np.generic):
        return _rounded(obj.item())
    if isinstance(obj, np.ndarray):
        return _rounded(obj.tolist())
    return obj


@dataclass
class MetricsReport:
    per_task: dict[str, list[Metric]]
    reference: dict[str, list[Metric]] | None = None
    params: int = 0
    flops: int = 0
    delta_per_task: dict[str, float] = field(default_factory=dict)
    delta_overall: float | None = None

    def __post_init__(self):
        if self.reference is not None:
            self.compute_deltas(self.reference)

    def compute_deltas(self, reference: Mapping[str, Sequence[Metric]]) -> None:
        self.reference = {k: list(v) for k, v in reference.items()}
        self.delta_per_task = {
            name: relative_performance(metrics, self.reference[name]) for name, metrics in self.per_task.items()
        }
        self.delta_overall = overall_performance(self.delta_per_task.values())

    def to_dict(self) -> dict:
        return {
            "per_task": {
                name: {
                    "metrics": {m: v for m, v, _ in metrics},
                    "directions": {m: d for m, _, d in metrics},
                    "delta": self.delta_per_task.get(name),
                }
                for name, metrics in self.per_task.items()
            },
            "delta_overall": self.delta_overall,
            "params": int(self.params),
            "flops": int(self.flops),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        per_task = {
            name: [(m, float(v), int(entry["directions"][m])) for m, v in entry["metrics"].items()]
            for name, entry in d["per_task"].items()
        }
        rep = cls(per_task, params=d.get("params", 0), flops=d.get("flops", 0))
        rep.delta_per_task = {n: e["delta"] for n, e in d["per_task"].items() if e.get("delta") is not None}
        rep.delta_overall = d.get("delta_overall")
        return rep


def dumps_json(obj) -> str:
    """Stable, 6-significant-digit JSON, newline-terminated."""
    return json.dumps(_rounded(obj), indent=2, sort_keys=True) + "\n"


def results_document(config_hash: str, seed: int, runs: list[dict], correlation) -> dict:
    """Top-level results schema; ``runs`` entries hold name, per_task, delta_overall, params, flops."""
    corr = correlation.values if isinstance(correlation, CorrelationMatrix) else correlation
    return {
        "config_hash": config_hash,
        "seed": int(seed),
        "runs": runs,
        "correlation": None if corr is None else np.asarray(corr).tolist(),
    }


def render_heatmap_svg(alpha: np.ndarray, task_names: Sequence[str], cell: int = 24) -> str:
    """L columns by K rows of squares; darker means more likely executed."""
    alpha = np.asarray(alpha)
    L, K = alpha.shape
    label_w = 8 * max(len(n) for n in task_names) + 8
    width, height = label_w + L * cell, K * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for k, name in enumerate(task_names):
        y = k * cell
        parts.append(
            f'<text x="2" y="{y + cell * 0.7:.1f}" font-family="monospace" font-size="12">{_escape(name)}</text>'
        )
        for l in range(L):
            g = int(round(255 * (1.0 - float(alpha[l, k]))))
            parts.append(
                f'<rect x="{label_w + l * cell}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({g},{g},{g})" stroke="#888" data-block="{l}" data-task="{k}"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_report(artifacts, baselines: Mapping[str, MetricsReport], task_names: Sequence[str],
                  config_hash: str, seed: int) -> tuple[str, str]:
    """Return ``(results_json, heatmap_svg)`` for one AdaShare run and its baselines.

    ``baselines`` must contain ``single_task``; every report is re-scored
    against it.
    """
    if "single_task" not in baselines:
        raise ValueError("single-task reference missing; relative performance undefined")
    reference = baselines["single_task"].per_task
    runs = []
    for name, rep in baselines.items():
        rep.compute_deltas(reference)
        runs.append({"name": name, **rep.to_dict()})
    best = artifacts.retrain_results[artifacts.best_index].test
    best.compute_deltas(reference)
    runs.append(
        {"name": "adashare", "decisions": artifacts.sampled_decisions[artifacts.best_index].to_list(), **best.to_dict()}
    )
    doc = results_document(config_hash, seed, runs, task_correlation(artifacts.learned_logits))
    return dumps_json(doc), render_heatmap_svg(artifacts.learned_logits.alpha(), task_names)
