"""Core record types and ingestion for patient event streams.

Events arrive as JSONL or CSV rows, one clinical fact per row. Ingestion
groups rows into per-patient timelines sorted by start time, reconstructs
visits from visit-table rows, and reports parse statistics. Prediction
labels are ingested separately and merged per (patient, task, time).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, Optional, Union

Value = Union[float, str, None]


class IngestError(Exception):
    """Raised when an input stream cannot be ingested as a whole."""


class LabelConflictError(Exception):
    """Raised when two labels for the same (patient, task, time) disagree."""


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC 3339 timestamp into a timezone-aware UTC datetime.

    Accepts a trailing 'Z' as well as explicit offsets; naive timestamps
    are taken to be UTC.
    """
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def parse_value(raw: object) -> Value:
    """Normalize a wire value: numbers stay numeric, numeric-looking text is
    parsed with a locale-independent decimal point, other text is kept as-is.
    """
    if raw is None:
        return None
    if isinstance(raw, bool):
        return float(raw)
    if isinstance(raw, (int, float)):
        return float(raw)
    text = str(raw).strip()
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        return text


@dataclass(frozen=True)
class ClinicalEvent:
    """One coded clinical fact attached to a patient timeline."""

    patient_id: str
    start: datetime
    code: str
    end: Optional[datetime] = None
    value: Value = None
    unit: Optional[str] = None
    visit_id: Optional[str] = None
    source_table: str = ""

    def __post_init__(self) -> None:
        if self.code.count("/") != 1 or self.code.startswith("/") or self.code.endswith("/"):
            raise ValueError(f"code must look like ONTOLOGY/CODE, got {self.code!r}")
        if self.end is not None and self.end < self.start:
            raise ValueError("event end precedes start")

    @property
    def ontology(self) -> str:
        return self.code.split("/", 1)[0]


@dataclass(frozen=True)
class Visit:
    visit_id: str
    start: datetime
    end: Optional[datetime]
    type_code: str


@dataclass(frozen=True)
class DemographicsConfig:
    """Code shapes that mark demographic events inside the stream."""

    birth_codes: tuple[str, ...] = ("SNOMED/3950001",)
    sex_prefix: str = "Gender/"
    race_prefix: str = "Race/"
    ethnicity_prefix: str = "Ethnicity/"

    def kind_of(self, code: str) -> Optional[str]:
        if code in self.birth_codes:
            return "birth"
        if code.startswith(self.sex_prefix):
            return "sex"
        if code.startswith(self.race_prefix):
            return "race"
        if code.startswith(self.ethnicity_prefix):
            return "ethnicity"
        return None


@dataclass
class Patient:
    """A patient timeline: events sorted by start, visits keyed by id.

    Every non-null event.visit_id must refer to a visit reconstructed from a
    visit-table row; violations raise at construction time.
    """

    patient_id: str
    events: list[ClinicalEvent]
    visits: dict[str, Visit] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for prev, cur in zip(self.events, self.events[1:]):
            if cur.start < prev.start:
                raise ValueError(f"events of patient {self.patient_id} are not sorted")
        for ev in self.events:
            if ev.visit_id is not None and ev.visit_id not in self.visits:
                raise ValueError(
                    f"patient {self.patient_id}: event references unknown visit {ev.visit_id!r}"
                )

    def birth_datetime(self, demo: DemographicsConfig = DemographicsConfig()) -> Optional[datetime]:
        for ev in self.events:
            if demo.kind_of(ev.code) == "birth":
                return ev.start
        return None

    def demographic_codes(self, demo: DemographicsConfig = DemographicsConfig()) -> dict[str, str]:
        """First-seen code per demographic kind, birth excluded."""
        found: dict[str, str] = {}
        for ev in self.events:
            kind = demo.kind_of(ev.code)
            if kind is not None and kind != "birth" and kind not in found:
                found[kind] = ev.code
        return found


def age_in_years(birth: datetime, at: datetime) -> int:
    """Completed calendar years between birth and the given moment."""
    years = at.year - birth.year
    if (at.month, at.day) < (birth.month, birth.day):
        years -= 1
    return years


@dataclass(frozen=True)
class PredictionInstance:
    patient_id: str
    task_id: str
    prediction_time: datetime
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def instance_key(self) -> str:
        return f"{self.patient_id}|{self.task_id}|{self.prediction_time.isoformat()}"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    task_group: str
    instruction_query: str


@dataclass
class IngestResult:
    patients: dict[str, Patient]
    rows_read: int
    rows_rejected: int
    reject_reasons: list[tuple[int, str]]

    @property
    def rejected_fraction(self) -> float:
        return self.rows_rejected / self.rows_read if self.rows_read else 0.0


def _iter_rows(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, row_dict) from JSONL or headered CSV text lines.

    The first non-blank line decides the format: '{' means JSONL. Rows that
    fail to parse are yielded as {'_parse_error': reason}.
    """
    buffered = list(lines)
    first = next((ln for ln in buffered if ln.strip()), "")
    if first.lstrip().startswith("{"):
        for no, ln in enumerate(buffered, start=1):
            if not ln.strip():
                continue
            try:
                row = json.loads(ln)
                if not isinstance(row, dict):
                    row = {"_parse_error": "row is not an object"}
            except json.JSONDecodeError as exc:
                row = {"_parse_error": f"bad json: {exc.msg}"}
            yield no, row
    else:
        # lines may arrive with or without their newline
        reader = csv.DictReader(io.StringIO("\n".join(ln.rstrip("\r\n") for ln in buffered)))
        for no, row in enumerate(reader, start=2):
            if row.get(None) is not None:
                yield no, {"_parse_error": "extra unnamed columns"}
                continue
            yield no, {k: (None if v == "" else v) for k, v in row.items() if k is not None}


_EVENT_FIELDS = {"patient_id", "start", "end", "code", "value", "unit", "visit_id", "source_table"}


def _event_from_row(row: dict) -> ClinicalEvent:
    unknown = set(row) - _EVENT_FIELDS
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    pid = row.get("patient_id")
    if not pid or not isinstance(pid, str):
        raise ValueError("missing patient_id")
    if not isinstance(row.get("start"), str):
        raise ValueError("missing start")
    start = parse_rfc3339(row["start"])
    end = parse_rfc3339(row["end"]) if row.get("end") is not None else None
    code = row.get("code")
    if not code or not isinstance(code, str):
        raise ValueError("missing code")
    source = row.get("source_table")
    if not source or not isinstance(source, str):
        raise ValueError("missing source_table")
    unit = row.get("unit")
    if unit is not None and not isinstance(unit, str):
        raise ValueError("unit must be text")
    visit_id = row.get("visit_id")
    if visit_id is not None and not isinstance(visit_id, str):
        raise ValueError("visit_id must be text")
    return ClinicalEvent(
        patient_id=pid,
        start=start,
        end=end,
        code=code,
        value=parse_value(row.get("value")),
        unit=unit,
        visit_id=visit_id,
        source_table=source,
    )


def ingest_events(
    lines: Iterable[str],
    max_reject_fraction: float = 0.01,
    visit_source_table: str = "visit",
) -> IngestResult:
    """Group event rows into validated patients.

    Rows that fail schema validation are counted and reported; if more than
    max_reject_fraction of rows are rejected the whole ingest fails. A row
    whose source_table equals visit_source_table and that carries a visit_id
    additionally defines a visit (first definition wins). Events keep input
    order for identical start times.
    """
    per_patient: dict[str, list[ClinicalEvent]] = {}
    rows_read = 0
    rejects: list[tuple[int, str]] = []
    for line_no, row in _iter_rows(lines):
        rows_read += 1
        if "_parse_error" in row:
            rejects.append((line_no, row["_parse_error"]))
            continue
        try:
            ev = _event_from_row(row)
        except ValueError as exc:
            rejects.append((line_no, str(exc)))
            continue
        per_patient.setdefault(ev.patient_id, []).append(ev)

    if rows_read and len(rejects) / rows_read > max_reject_fraction:
        preview = "; ".join(f"line {no}: {why}" for no, why in rejects[:5])
        raise IngestError(
            f"rejected {len(rejects)}/{rows_read} rows "
            f"(> {max_reject_fraction:.2%} allowed): {preview}"
        )

    patients: dict[str, Patient] = {}
    for pid in sorted(per_patient):
        evs = sorted(per_patient[pid], key=lambda e: e.start)
        visits: dict[str, Visit] = {}
        for ev in evs:
            if ev.source_table == visit_source_table and ev.visit_id is not None:
                if ev.visit_id not in visits:
                    visits[ev.visit_id] = Visit(ev.visit_id, ev.start, ev.end, ev.code)
        try:
            patients[pid] = Patient(pid, evs, visits)
        except ValueError as exc:
            raise IngestError(str(exc)) from exc
    return IngestResult(patients, rows_read, len(rejects), rejects)


def ingest_labels(lines: Iterable[str]) -> list[PredictionInstance]:
    """Parse label rows; any malformed row fails the ingest."""
    out: list[PredictionInstance] = []
    for line_no, row in _iter_rows(lines):
        if "_parse_error" in row:
            raise IngestError(f"label line {line_no}: {row['_parse_error']}")
        try:
            label_raw = row.get("label")
            if isinstance(label_raw, str):
                label_raw = int(label_raw)
            if isinstance(label_raw, bool):
                label_raw = int(label_raw)
            out.append(
                PredictionInstance(
                    patient_id=row["patient_id"],
                    task_id=row["task_id"],
                    prediction_time=parse_rfc3339(row["prediction_time"]),
                    label=int(label_raw),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"label line {line_no}: {exc}") from exc
    return out


def merge_labels(instances: Iterable[PredictionInstance]) -> list[PredictionInstance]:
    """Collapse duplicate (patient, task, prediction_time) labels.

    Identical duplicates merge to one instance; contradictory duplicates
    raise LabelConflictError naming the offending key. First-seen order of
    keys is preserved.
    """
    seen: dict[tuple[str, str, datetime], PredictionInstance] = {}
    for inst in instances:
        key = (inst.patient_id, inst.task_id, inst.prediction_time)
        prior = seen.get(key)
        if prior is None:
            seen[key] = inst
        elif prior.label != inst.label:
            raise LabelConflictError(
                f"conflicting labels for patient={inst.patient_id} task={inst.task_id} "
                f"time={inst.prediction_time.isoformat()}"
            )
    return list(seen.values())


def events_before(patient: Patient, cutoff: datetime) -> list[ClinicalEvent]:
    """Events strictly before the cutoff; an event starting at the cutoff is
    excluded."""
    return [ev for ev in patient.events if ev.start < cutoff]


def load_task_specs(instruction_lines: Iterable[str], group_lines: Optional[Iterable[str]] = None) -> dict[str, TaskSpec]:
    """Build TaskSpecs from a task->query TSV plus an optional task->group TSV.

    Tasks without a group entry fall into group 'default'.
    """
    groups: dict[str, str] = {}
    if group_lines is not None:
        for ln in group_lines:
            if not ln.strip():
                continue
            task_id, group = ln.rstrip("\n").split("\t")
            groups[task_id] = group
    specs: dict[str, TaskSpec] = {}
    for ln in instruction_lines:
        if not ln.strip():
            continue
        task_id, query = ln.rstrip("\n").split("\t")
        specs[task_id] = TaskSpec(task_id, groups.get(task_id, "default"), query)
    return specs
