"""Synthetic cohort generator with a planted, text-recoverable label.

The label of every instance is 1 exactly when the patient's last
hemoglobin value before the prediction time is below 12.0 g/dL. Hemoglobin
levels are drawn per-patient from disjoint low/normal regimes, so labels
are recomputable from the event stream. Everything else (visit structure,
noise conditions, medications, procedures, in-range vitals) is drawn
independently of the label, which leaves occurrence counts carrying no
signal while the rendered text carries a strong one.

Event times sit on a weekly grid behind the prediction time and cutoffs on
a weekly grid of their own, so rendered dates and day offsets come from
small shared menus instead of acting as per-patient identifiers that a
bag-of-words model could memorize.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

TASK_ID = "anemia"

_CONDITION_CODES = [f"SNOMED/C{i:03d}" for i in range(1, 21)]
_MEDICATION_CODES = [f"RxNorm/M{i:02d}" for i in range(1, 11)]
_PROCEDURE_CODES = [f"CPT4/PR{i:02d}" for i in range(1, 9)]

_DESCRIPTIONS: dict[str, str] = {
    "Gender/F": "Female",
    "Gender/M": "Male",
    "Race/1": "White",
    "Race/2": "Black or African American",
    "Race/3": "Asian",
    "Ethnicity/1": "Not Hispanic or Latino",
    "Ethnicity/2": "Hispanic or Latino",
    "Visit/IP": "Inpatient Visit",
    "Visit/OP": "Outpatient Visit",
    "Visit/ER": "Emergency Room Visit",
    "LOINC/XQ01": "pH measurement, venous",
    "LOINC/718-7": "Hemoglobin measurement",
    "SNOMED/271026005": "Hemoglobin level",
    "LOINC/8867-4": "Heart rate measurement",
    "LOINC/2951-2": "Sodium measurement",
    "LOINC/2345-7": "Glucose measurement",
    "LOINC/8480-6": "Systolic blood pressure measurement",
    "SNOMED/3950001": "Birth",
}
for _i, _code in enumerate(_CONDITION_CODES, start=1):
    _DESCRIPTIONS[_code] = f"Chronic condition {_i}"
for _i, _code in enumerate(_MEDICATION_CODES, start=1):
    _DESCRIPTIONS[_code] = f"Medication {_i} oral tablet"
for _i, _code in enumerate(_PROCEDURE_CODES, start=1):
    _DESCRIPTIONS[_code] = f"Procedure {_i}"

# Conditions roll up to five parents which share one root, exercising
# parent and grandparent expansion in the counts baseline.
_HIERARCHY: list[tuple[str, str]] = []
for _i, _code in enumerate(_CONDITION_CODES):
    _HIERARCHY.append((_code, f"SNOMED/P{_i // 4 + 1}"))
for _p in range(1, 6):
    _HIERARCHY.append((f"SNOMED/P{_p}", "SNOMED/ROOT"))
    _DESCRIPTIONS[f"SNOMED/P{_p}"] = f"Condition family {_p}"
_DESCRIPTIONS["SNOMED/ROOT"] = "Clinical finding"


@dataclass
class SyntheticSummary:
    n_patients: int
    n_events: int
    prevalence: float
    split_sizes: dict[str, int]


def _iso(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def generate_cohort(
    out_dir: str | Path,
    n_patients: int = 2000,
    seed: int = 0,
    prevalence: float = 0.3,
) -> SyntheticSummary:
    """Write events.jsonl, labels.jsonl, splits.jsonl plus ontology TSVs.

    Positive labels are assigned to exactly round(n * prevalence) patients
    (shuffled), so the realized prevalence matches the parameter up to
    rounding. Split assignment is 50/30/20 train/valid/test by patient.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)

    n_pos = round(n_patients * prevalence)
    pos_flags = [True] * n_pos + [False] * (n_patients - n_pos)
    rng.shuffle(pos_flags)

    split_names = (["train"] * int(n_patients * 0.5)
                   + ["valid"] * int(n_patients * 0.3))
    split_names += ["test"] * (n_patients - len(split_names))
    rng.shuffle(split_names)

    base_cutoff = datetime(2023, 6, 1, tzinfo=timezone.utc)
    events_path = out / "events.jsonl"
    labels_path = out / "labels.jsonl"
    splits_path = out / "splits.jsonl"
    n_events = 0

    with open(events_path, "w", encoding="utf-8") as ev_fh, \
         open(labels_path, "w", encoding="utf-8") as lb_fh, \
         open(splits_path, "w", encoding="utf-8") as sp_fh:
        for idx in range(n_patients):
            pid = f"p{idx:05d}"
            positive = pos_flags[idx]
            cutoff = base_cutoff.replace(hour=15) + timedelta(weeks=rng.randint(0, 25))
            rows: list[dict] = []

            def emit(start: datetime, code: str, source: str, value=None,
                     unit=None, visit_id=None, end=None) -> None:
                rows.append(
                    {
                        "patient_id": pid,
                        "start": _iso(start),
                        "end": _iso(end) if end else None,
                        "code": code,
                        "value": value,
                        "unit": unit,
                        "visit_id": visit_id,
                        "source_table": source,
                    }
                )

            birth = datetime(rng.randint(1940, 2000), rng.randint(1, 12), rng.randint(1, 28),
                             tzinfo=timezone.utc)
            emit(birth, "SNOMED/3950001", "person")
            emit(birth, rng.choice(["Gender/F", "Gender/M"]), "person")
            emit(birth, f"Race/{rng.randint(1, 3)}", "person")
            emit(birth, f"Ethnicity/{rng.randint(1, 2)}", "person")

            def moment() -> datetime:
                # Whole weeks before the cutoff, morning-of: the printed day
                # offset is then an exact multiple of 7 from a shared menu.
                weeks_back = rng.randint(1, 104)
                day = cutoff - timedelta(weeks=weeks_back)
                return day.replace(hour=9, minute=0, second=0) + timedelta(seconds=rng.randint(0, 3599))

            visit_ids: list[str] = []
            for v in range(rng.randint(1, 5)):
                vid = f"{pid}-v{v}"
                v_start = moment()
                v_end = v_start + timedelta(days=rng.randint(0, 5))
                v_code = rng.choice(["Visit/IP", "Visit/OP", "Visit/ER"])
                emit(v_start, v_code, "visit", visit_id=vid, end=v_end)
                visit_ids.append(vid)
                for code in rng.sample(_CONDITION_CODES, rng.randint(1, 4)):
                    emit(v_start + timedelta(hours=rng.randint(0, 24)), code, "condition", visit_id=vid)
                for code in rng.sample(_MEDICATION_CODES, rng.randint(0, 2)):
                    emit(v_start + timedelta(hours=rng.randint(0, 24)), code, "medication", visit_id=vid)
                for code in rng.sample(_PROCEDURE_CODES, rng.randint(0, 1)):
                    emit(v_start + timedelta(hours=rng.randint(0, 24)), code, "procedure", visit_id=vid)

            # Hemoglobin regime decides the label; measurement count does not.
            hb_level = rng.uniform(8.5, 11.3) if positive else rng.uniform(12.6, 16.5)
            for _ in range(rng.randint(3, 5)):
                value = hb_level + rng.gauss(0.0, 0.25)
                value = min(max(value, 8.0), 11.9) if positive else min(max(value, 12.1), 17.0)
                code = rng.choice(["LOINC/718-7", "LOINC/718-7", "SNOMED/271026005"])
                emit(moment(), code, "measurement", value=round(value, 2), unit="g/dL",
                     visit_id=rng.choice(visit_ids + [None]))

            # In-range vitals and labs: text texture, no label signal.
            for _ in range(rng.randint(1, 3)):
                emit(moment(), "LOINC/8867-4", "measurement",
                     value=float(rng.randint(62, 98)), unit="bpm",
                     visit_id=rng.choice(visit_ids + [None]))
            for _ in range(rng.randint(1, 2)):
                emit(moment(), "LOINC/2951-2", "measurement",
                     value=float(rng.randint(137, 144)), unit="mmol/L")
            for _ in range(rng.randint(1, 2)):
                emit(moment(), "LOINC/2345-7", "measurement",
                     value=float(rng.randint(72, 99)), unit="mg/dL")
            for _ in range(rng.randint(0, 2)):
                emit(moment(), "LOINC/8480-6", "measurement",
                     value=float(rng.randint(95, 135)), unit="mmHg")
            for _ in range(rng.randint(0, 2)):
                emit(moment(), "LOINC/XQ01", "measurement",
                     value=round(rng.uniform(7.25, 7.45), 2))

            rows.sort(key=lambda r: r["start"])
            for row in rows:
                ev_fh.write(json.dumps(row) + "\n")
            n_events += len(rows)

            lb_fh.write(json.dumps({
                "patient_id": pid,
                "task_id": TASK_ID,
                "prediction_time": _iso(cutoff),
                "label": 1 if positive else 0,
            }) + "\n")
            sp_fh.write(json.dumps({"patient_id": pid, "split": split_names[idx]}) + "\n")

    with open(out / "descriptions.tsv", "w", encoding="utf-8") as fh:
        for code in sorted(_DESCRIPTIONS):
            fh.write(f"{code}\t{_DESCRIPTIONS[code]}\n")
    with open(out / "hierarchy.tsv", "w", encoding="utf-8") as fh:
        for child, parent in _HIERARCHY:
            fh.write(f"{child}\t{parent}\n")

    sizes = {name: split_names.count(name) for name in ("train", "valid", "test")}
    return SyntheticSummary(
        n_patients=n_patients,
        n_events=n_events,
        prevalence=n_pos / n_patients,
        split_sizes=sizes,
    )
