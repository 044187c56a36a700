"""Few-shot evaluation protocol over frozen feature vectors.

For every task, k and seed: draw k positives and k negatives from the train
split and the same from the valid split, tune the head on those shots, then
score the entire test split. Per-seed metrics feed the report; aggregation
averages seeds per task, tasks per group, and groups into the macro mean.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .events import PredictionInstance, TaskSpec
from .evaluation import (
    K_GRID_DEFAULT,
    METRIC_FNS,
    InsufficientSupportError,
    MetricEntry,
    MetricReport,
    UndefinedMetricError,
    bootstrap_ci,
    sample_shots,
)
from .heads import tune


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from a sequence of labels; platform independent."""
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class FewShotConfig:
    k_grid: tuple[int, ...] = K_GRID_DEFAULT
    n_seeds: int = 5
    base_seed: int = 0
    head: str = "lr"
    metrics: tuple[str, ...] = ("auroc", "auprc", "brier")
    n_boot: int = 1000
    ci_level: float = 0.95
    full_data: bool = False
    head_grid: Optional[tuple[dict, ...]] = None

    def __post_init__(self) -> None:
        unknown = set(self.metrics) - set(METRIC_FNS)
        if unknown:
            raise ValueError(f"unknown metrics: {sorted(unknown)}")
        if self.head not in ("lr", "gbm"):
            raise ValueError(f"unknown head: {self.head!r}")


class FeatureLookupError(Exception):
    pass


def fewshot_config_from_dict(raw: Optional[dict]) -> FewShotConfig:
    raw = dict(raw or {})
    kwargs: dict = {}
    if "k_grid" in raw:
        kwargs["k_grid"] = tuple(int(k) for k in raw.pop("k_grid"))
    if "metrics" in raw:
        kwargs["metrics"] = tuple(raw.pop("metrics"))
    if "head_grid" in raw:
        kwargs["head_grid"] = tuple(dict(g) for g in raw.pop("head_grid"))
    for key in ("n_seeds", "base_seed", "n_boot"):
        if key in raw:
            kwargs[key] = int(raw.pop(key))
    if "ci_level" in raw:
        kwargs["ci_level"] = float(raw.pop("ci_level"))
    if "head" in raw:
        kwargs["head"] = str(raw.pop("head"))
    if "full_data" in raw:
        kwargs["full_data"] = bool(raw.pop("full_data"))
    if raw:
        raise ValueError(f"unknown evaluation config keys: {sorted(raw)}")
    return FewShotConfig(**kwargs)


def _matrix_for(
    instances: Sequence[PredictionInstance], features: Mapping[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for inst in instances:
        vec = features.get(inst.instance_key)
        if vec is None:
            raise FeatureLookupError(f"no feature vector for {inst.instance_key}")
        rows.append(vec)
    X = np.vstack(rows)
    y = np.asarray([inst.label for inst in instances], dtype=np.float64)
    return X, y


def run_fewshot(
    instances: Sequence[PredictionInstance],
    split_of: Mapping[str, str],
    features: Mapping[str, np.ndarray],
    tasks: Mapping[str, TaskSpec],
    config: FewShotConfig = FewShotConfig(),
) -> MetricReport:
    """Run the protocol and return the filled report.

    Entries that cannot be produced (insufficient shot support, single-class
    test split) are recorded under 'skipped' with their reason instead of
    failing the run.
    """
    report = MetricReport(config={"protocol": "fewshot", "head": config.head,
                                  "k_grid": list(config.k_grid), "n_seeds": config.n_seeds,
                                  "n_boot": config.n_boot, "base_seed": config.base_seed,
                                  "full_data": config.full_data})
    by_task: dict[str, dict[str, list[PredictionInstance]]] = {}
    for inst in instances:
        split = split_of.get(inst.patient_id)
        if split is None:
            raise FeatureLookupError(f"patient {inst.patient_id} has no split assignment")
        by_task.setdefault(inst.task_id, {"train": [], "valid": [], "test": []})[split].append(inst)

    for task_id in sorted(by_task):
        task = tasks.get(task_id)
        group = task.task_group if task is not None else "default"
        pools = by_task[task_id]
        test_X, test_y = (None, None)
        if pools["test"]:
            test_X, test_y = _matrix_for(pools["test"], features)

        ks: list[Optional[int]] = list(config.k_grid)
        if config.full_data:
            ks.append(None)
        for k in ks:
            for seed_index in range(config.n_seeds):
                entry_seed = derive_seed(config.base_seed, task_id, "full" if k is None else k, seed_index)
                try:
                    if k is None:
                        train_insts = sorted(pools["train"], key=lambda i: i.instance_key)
                        valid_insts = sorted(pools["valid"], key=lambda i: i.instance_key)
                    else:
                        shots = sample_shots(pools["train"], pools["valid"], k, entry_seed)
                        train_insts, valid_insts = list(shots.train), list(shots.valid)
                    if not train_insts or not valid_insts:
                        raise InsufficientSupportError("empty train or valid pool")
                    if test_X is None:
                        raise UndefinedMetricError("empty test pool")
                    X_tr, y_tr = _matrix_for(train_insts, features)
                    X_va, y_va = _matrix_for(valid_insts, features)
                    tuned = tune(config.head, X_tr, y_tr, X_va, y_va, grid=config.head_grid)
                    scores = tuned.model.predict_proba(test_X)
                    for metric_name in config.metrics:
                        fn = METRIC_FNS[metric_name]
                        lo = hi = None
                        if config.n_boot > 0:
                            boot = bootstrap_ci(
                                scores, test_y, fn,
                                n_boot=config.n_boot, level=config.ci_level,
                                seed=derive_seed(entry_seed, metric_name),
                            )
                            value, lo, hi = boot.point, boot.lo, boot.hi
                        else:
                            value = fn(scores, test_y)
                        report.entries.append(
                            MetricEntry(task_id, group, k, seed_index, metric_name, float(value), lo, hi)
                        )
                except (InsufficientSupportError, UndefinedMetricError) as exc:
                    report.skipped.append(
                        {
                            "task_id": task_id,
                            "k": "full" if k is None else k,
                            "seed": seed_index,
                            "reason": str(exc),
                        }
                    )
                # full-data mode has no sampling variance beyond head
                # determinism, so one seed is enough
                if k is None:
                    break
    return report
