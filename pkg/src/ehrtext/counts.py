"""Count-based baseline features: per-code event counts over cumulative
time intervals, with hierarchy expansion and patient-support filtering.

Feature columns are ordered interval-ascending then code-lexicographic.
Values attached to events are ignored on purpose; only occurrence counts
enter the representation. Demographics (age scaled by 100, coded sex, and
a missingness indicator) are appended explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping, Optional, Sequence

import numpy as np

from .events import DemographicsConfig, Patient, PredictionInstance, age_in_years, events_before
from .ontology import OntologyIndex

DEFAULT_INTERVALS: tuple[Optional[timedelta], ...] = (
    timedelta(days=1),
    timedelta(days=7),
    timedelta(days=30),
    timedelta(days=365),
    timedelta(days=1095),
    None,  # unbounded
)


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class CountsConfig:
    intervals: tuple[Optional[timedelta], ...] = DEFAULT_INTERVALS
    min_patient_support: int = 50

    def __post_init__(self) -> None:
        bounded = [iv for iv in self.intervals if iv is not None]
        if sorted(bounded) != bounded:
            raise ConfigError("bounded intervals must be ascending")
        if self.intervals.count(None) > 1 or (None in self.intervals and self.intervals[-1] is not None):
            raise ConfigError("the unbounded interval must come last")
        if not self.intervals:
            raise ConfigError("at least one interval is required")


def counts_config_from_dict(raw: Optional[dict]) -> CountsConfig:
    raw = dict(raw or {})
    kwargs: dict = {}
    if "intervals" in raw:
        parsed: list[Optional[timedelta]] = []
        for name in raw.pop("intervals"):
            if name in ("unbounded", "all", None):
                parsed.append(None)
            elif isinstance(name, str) and name.endswith("d"):
                parsed.append(timedelta(days=int(name[:-1])))
            elif isinstance(name, str) and name.endswith("h"):
                parsed.append(timedelta(hours=int(name[:-1])))
            else:
                raise ConfigError(f"bad interval spec: {name!r}")
        kwargs["intervals"] = tuple(parsed)
    if "min_patient_support" in raw:
        kwargs["min_patient_support"] = int(raw.pop("min_patient_support"))
    if raw:
        raise ConfigError(f"unknown counts config keys: {sorted(raw)}")
    return CountsConfig(**kwargs)


@dataclass(frozen=True)
class CountFeatureSpace:
    intervals: tuple[Optional[timedelta], ...]
    codes: tuple[str, ...]

    @property
    def width(self) -> int:
        return len(self.intervals) * len(self.codes)

    def column(self, interval_index: int, code: str) -> Optional[int]:
        try:
            code_index = self._code_index[code]
        except KeyError:
            return None
        return interval_index * len(self.codes) + code_index

    @property
    def _code_index(self) -> dict[str, int]:
        cached = self.__dict__.get("_code_index_cache")
        if cached is None:
            cached = {c: i for i, c in enumerate(self.codes)}
            object.__setattr__(self, "_code_index_cache", cached)
        return cached

    def feature_names(self) -> list[str]:
        names = []
        for iv in self.intervals:
            label = "all" if iv is None else f"{iv.days}d" if iv >= timedelta(days=1) else f"{int(iv.total_seconds() // 3600)}h"
            names.extend(f"{label}:{code}" for code in self.codes)
        return names


def _expansion_cache(ontology: OntologyIndex) -> dict[str, dict[str, int]]:
    return {}


def _expand_code(ontology: OntologyIndex, cache: dict[str, dict[str, int]], code: str) -> dict[str, int]:
    hit = cache.get(code)
    if hit is None:
        hit = dict(ontology.expand({code: 1}))
        cache[code] = hit
    return hit


def build_feature_space(
    patients: Mapping[str, Patient],
    instances: Sequence[PredictionInstance],
    ontology: OntologyIndex,
    config: CountsConfig = CountsConfig(),
) -> CountFeatureSpace:
    """Vocabulary of expanded codes seen before any instance cutoff, kept
    when at least min_patient_support distinct patients carry them.

    An empty vocabulary after filtering is a configuration error.
    """
    cache = _expansion_cache(ontology)
    support: dict[str, set[str]] = {}
    cutoffs: dict[str, list[datetime]] = {}
    for inst in instances:
        cutoffs.setdefault(inst.patient_id, []).append(inst.prediction_time)
    for pid, times in cutoffs.items():
        patient = patients.get(pid)
        if patient is None:
            continue
        latest = max(times)
        seen: set[str] = set()
        for ev in events_before(patient, latest):
            seen.update(_expand_code(ontology, cache, ev.code))
        for code in seen:
            support.setdefault(code, set()).add(pid)
    kept = sorted(
        code for code, pids in support.items() if len(pids) >= config.min_patient_support
    )
    if not kept:
        raise ConfigError(
            f"no code reaches min_patient_support={config.min_patient_support}; "
            "lower the threshold or provide more data"
        )
    return CountFeatureSpace(intervals=config.intervals, codes=tuple(kept))


def count_vector(
    patient: Patient,
    cutoff: datetime,
    space: CountFeatureSpace,
    ontology: OntologyIndex,
    _cache: Optional[dict] = None,
) -> np.ndarray:
    """Expanded-code occurrence counts for every (interval, code) column.

    An event contributes to every interval that contains it, so wider
    intervals accumulate at least the counts of narrower ones. Event values
    are ignored.
    """
    vec = np.zeros(space.width, dtype=np.float64)
    cache = _cache if _cache is not None else _expansion_cache(ontology)
    for ev in events_before(patient, cutoff):
        age = cutoff - ev.start
        expanded = _expand_code(ontology, cache, ev.code)
        for i, interval in enumerate(space.intervals):
            if interval is not None and age > interval:
                continue
            for code, mult in expanded.items():
                col = space.column(i, code)
                if col is not None:
                    vec[col] += mult
    return vec


def add_demographics(
    vector: np.ndarray,
    patient: Patient,
    cutoff: datetime,
    demographics: DemographicsConfig = DemographicsConfig(),
) -> np.ndarray:
    """Append [age/100, sex, missing-indicator]; the result is exactly three
    entries longer. Sex codes ending in F map to 1 and M to 0; the indicator
    flags a missing birth date or unrecognized sex."""
    birth = patient.birth_datetime(demographics)
    age_term = 0.0
    missing = False
    if birth is not None and birth <= cutoff:
        age_term = age_in_years(birth, cutoff) / 100.0
    else:
        missing = True
    sex_term = 0.0
    sex_code = patient.demographic_codes(demographics).get("sex")
    if sex_code is None:
        missing = True
    else:
        local = sex_code[len(demographics.sex_prefix):].upper()
        if local.startswith("F"):
            sex_term = 1.0
        elif local.startswith("M"):
            sex_term = 0.0
        else:
            missing = True
    return np.concatenate([vector, [age_term, sex_term, 1.0 if missing else 0.0]])


def featurize_instances(
    patients: Mapping[str, Patient],
    instances: Sequence[PredictionInstance],
    space: CountFeatureSpace,
    ontology: OntologyIndex,
    demographics: DemographicsConfig = DemographicsConfig(),
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Feature matrix and label vector for a list of instances, row order
    following the instance order."""
    cache = _expansion_cache(ontology)
    keys: list[str] = []
    rows: list[np.ndarray] = []
    labels: list[int] = []
    for inst in instances:
        patient = patients[inst.patient_id]
        base = count_vector(patient, inst.prediction_time, space, ontology, cache)
        rows.append(add_demographics(base, patient, inst.prediction_time, demographics))
        keys.append(inst.instance_key)
        labels.append(inst.label)
    X = np.vstack(rows) if rows else np.zeros((0, space.width + 3))
    return keys, X, np.asarray(labels, dtype=np.float64)
