"""Metrics, bootstrap intervals, shot sampling and report aggregation.

AUROC follows the rank statistic with half credit for ties, AUPRC is
average precision with tied scores handled as blocks, and confidence
intervals come from patient-level bootstrap resampling with percentile
bounds. Few-shot draws are seeded and performed strictly within predefined
splits.
"""
from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .events import IngestError, PredictionInstance, _iter_rows


class UndefinedMetricError(Exception):
    """The metric is undefined on this sample (single-class labels)."""


class InsufficientSupportError(Exception):
    """A split lacks the positives or negatives required for a k-shot draw."""


def _as_arrays(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y


def _average_ranks(values: np.ndarray) -> np.ndarray:
    # 1-based ranks, ties averaged within each equal-value run.
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties at
    half credit."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = _average_ranks(s)
    u = ranks[y == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision, processing tied scores as single blocks."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("AUPRC needs both classes")
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    y_desc = y[order]
    ap = 0.0
    seen = 0
    tp = 0
    i = 0
    while i < y_desc.size:
        j = i
        while j + 1 < y_desc.size and s_desc[j + 1] == s_desc[i]:
            j += 1
        block_tp = float(y_desc[i : j + 1].sum())
        seen += j - i + 1
        tp += block_tp
        if block_tp:
            ap += (tp / seen) * (block_tp / n_pos)
        i = j + 1
    return float(ap)


def brier(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean squared difference between predicted probability and outcome."""
    s, y = _as_arrays(scores, labels)
    if s.size == 0:
        raise UndefinedMetricError("empty sample")
    return float(np.mean((s - y) ** 2))


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lo: float
    hi: float
    n_boot: int
    n_dropped: int


def bootstrap_ci(
    scores: Sequence[float],
    labels: Sequence[int],
    metric_fn: Callable[[np.ndarray, np.ndarray], float],
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    max_redraws: int = 100,
) -> BootstrapResult:
    """Percentile bootstrap over instance resamples.

    The point value is the metric on the original sample. A replicate that
    draws a single class is redrawn up to max_redraws times, then dropped
    and counted; if every replicate is dropped the interval is undefined.
    """
    s, y = _as_arrays(scores, labels)
    point = metric_fn(s, y)
    rng = np.random.default_rng(seed)
    n = s.size
    needs_both = metric_fn in (auroc, auprc)
    values = []
    dropped = 0
    for _ in range(n_boot):
        replicate = None
        for _attempt in range(max_redraws + 1):
            idx = rng.integers(0, n, size=n)
            if needs_both:
                picked = y[idx]
                if picked.min() == picked.max():
                    continue
            replicate = metric_fn(s[idx], y[idx])
            break
        if replicate is None:
            dropped += 1
        else:
            values.append(replicate)
    if not values:
        raise UndefinedMetricError("all bootstrap replicates were single-class")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapResult(float(point), float(lo), float(hi), n_boot, dropped)


# ---------------------------------------------------------------------------
# Few-shot sampling within predefined splits


@dataclass(frozen=True)
class ShotSample:
    train: tuple[PredictionInstance, ...]
    valid: tuple[PredictionInstance, ...]


def _draw_balanced(pool: Sequence[PredictionInstance], k: int, rng: random.Random, split_name: str) -> list[PredictionInstance]:
    pos = sorted((i for i in pool if i.label == 1), key=lambda i: i.instance_key)
    neg = sorted((i for i in pool if i.label == 0), key=lambda i: i.instance_key)
    if len(pos) < k or len(neg) < k:
        raise InsufficientSupportError(
            f"{split_name} split has {len(pos)} positives / {len(neg)} negatives, need {k} of each"
        )
    return rng.sample(pos, k) + rng.sample(neg, k)


def sample_shots(
    train_pool: Sequence[PredictionInstance],
    valid_pool: Sequence[PredictionInstance],
    k: int,
    seed: int,
) -> ShotSample:
    """Draw k positives plus k negatives from each of the train and valid
    pools, without replacement, deterministically for a given seed."""
    rng = random.Random(seed)
    train = _draw_balanced(train_pool, k, rng, "train")
    valid = _draw_balanced(valid_pool, k, rng, "valid")
    return ShotSample(tuple(train), tuple(valid))


def load_split_assignments(lines: Iterable[str]) -> dict[str, str]:
    """Parse split rows ({'patient_id', 'split'}) into a patient map."""
    out: dict[str, str] = {}
    for line_no, row in _iter_rows(lines):
        if "_parse_error" in row:
            raise IngestError(f"split line {line_no}: {row['_parse_error']}")
        pid, split = row.get("patient_id"), row.get("split")
        if not pid or split not in ("train", "valid", "test"):
            raise IngestError(f"split line {line_no}: bad row {row!r}")
        if pid in out and out[pid] != split:
            raise IngestError(f"patient {pid} assigned to two splits")
        out[pid] = split
    return out


# ---------------------------------------------------------------------------
# Report assembly

K_GRID_DEFAULT = (1, 2, 4, 8, 12, 16, 24, 32, 48, 64, 128)
METRIC_FNS: dict[str, Callable] = {"auroc": auroc, "auprc": auprc, "brier": brier}


@dataclass(frozen=True)
class MetricEntry:
    task_id: str
    task_group: str
    k: Optional[int]  # None in full-data mode
    seed: int
    metric: str
    value: float
    lo: Optional[float] = None
    hi: Optional[float] = None


@dataclass
class MetricReport:
    entries: list[MetricEntry] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        """Seed means per task, unweighted task means per group, unweighted
        group means overall."""
        per_task: dict[tuple[str, Optional[int], str], list[float]] = {}
        task_group: dict[str, str] = {}
        for e in self.entries:
            per_task.setdefault((e.task_id, e.k, e.metric), []).append(e.value)
            task_group[e.task_id] = e.task_group
        task_means = {
            key: float(np.mean(vals)) for key, vals in per_task.items()
        }
        per_group: dict[tuple[str, Optional[int], str], list[float]] = {}
        for (task, k, metric), mean in task_means.items():
            per_group.setdefault((task_group[task], k, metric), []).append(mean)
        group_means = {key: float(np.mean(vals)) for key, vals in per_group.items()}
        per_macro: dict[tuple[Optional[int], str], list[float]] = {}
        for (_group, k, metric), mean in group_means.items():
            per_macro.setdefault((k, metric), []).append(mean)
        macro_means = {key: float(np.mean(vals)) for key, vals in per_macro.items()}

        def k_str(k: Optional[int]) -> str:
            return "full" if k is None else str(k)

        # k may be an int or None (full-data mode), so sort through k_str
        def sort_key(item):
            (name, k, metric), _mean = item
            return (name, k is None, k or 0, metric)

        tasks: dict = {}
        for (task, k, metric), mean in sorted(task_means.items(), key=sort_key):
            tasks.setdefault(task, {}).setdefault(metric, {})[k_str(k)] = mean
        groups: dict = {}
        for (group, k, metric), mean in sorted(group_means.items(), key=sort_key):
            groups.setdefault(group, {}).setdefault(metric, {})[k_str(k)] = mean
        macro: dict = {}
        for (k, metric), mean in sorted(macro_means.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            macro.setdefault(metric, {})[k_str(k)] = mean
        return {"tasks": tasks, "groups": groups, "macro": macro}

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "entries": [
                {
                    "task_id": e.task_id,
                    "task_group": e.task_group,
                    "k": e.k,
                    "seed": e.seed,
                    "metric": e.metric,
                    "value": e.value,
                    "lo": e.lo,
                    "hi": e.hi,
                }
                for e in self.entries
            ],
            "skipped": self.skipped,
            "aggregates": self.aggregate(),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "group", "k", "seed", "metric", "value", "lo", "hi"])
        for e in self.entries:
            writer.writerow(
                [
                    e.task_id,
                    e.task_group,
                    "full" if e.k is None else e.k,
                    e.seed,
                    e.metric,
                    repr(e.value),
                    "" if e.lo is None else repr(e.lo),
                    "" if e.hi is None else repr(e.hi),
                ]
            )
        return buf.getvalue()

    def to_plot_csv(self) -> str:
        """Group-level and macro curves: one row per (group, k, metric)."""
        agg = self.aggregate()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task_group", "k", "metric", "mean"])
        for group in sorted(agg["groups"]):
            for metric in sorted(agg["groups"][group]):
                for k in sorted(agg["groups"][group][metric], key=_k_sort):
                    writer.writerow([group, k, metric, repr(agg["groups"][group][metric][k])])
        for metric in sorted(agg["macro"]):
            for k in sorted(agg["macro"][metric], key=_k_sort):
                writer.writerow(["macro", k, metric, repr(agg["macro"][metric][k])])
        return buf.getvalue()


def _k_sort(k: str) -> tuple[int, int]:
    return (1, 0) if k == "full" else (0, int(k))
