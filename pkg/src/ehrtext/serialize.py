"""Render a patient timeline into a token-budgeted text document.

The markdown layout follows a fixed section order: header, demographics,
recent body metrics, recent vital signs, recent lab results, visit summary,
events outside visits, then detailed visits newest-first with conditions,
medications and procedures grouped per visit. All structural formats (json,
xml, yaml) re-encode the exact section tree the markdown renderer consumes;
the event-list formats are flat chronological listings. Every format is
truncated to the configured token budget by a hard tail cut.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta, timezone
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Optional
from xml.etree import ElementTree as ET

import yaml

from .events import (
    ClinicalEvent,
    DemographicsConfig,
    Patient,
    Visit,
    age_in_years,
    events_before,
)
from .ontology import (
    CONDITION_ONTOLOGIES,
    MEDICATION_ONTOLOGIES,
    PROCEDURE_ONTOLOGIES,
    ConceptCategory,
    ConceptSpec,
    ConceptTable,
    OntologyIndex,
)

COMPONENT_ORDER = (
    "demographics",
    "body_metrics",
    "vital_signs",
    "lab_results",
    "visit_summary",
    "conditions",
    "medications",
    "procedures",
)
ALL_COMPONENTS = frozenset(COMPONENT_ORDER)

TIME_WINDOWS: dict[str, Optional[timedelta]] = {
    "1h": timedelta(hours=1),
    "1d": timedelta(days=1),
    "7d": timedelta(days=7),
    "30d": timedelta(days=30),
    "365d": timedelta(days=365),
    "1095d": timedelta(days=1095),
    "unbounded": None,
}


class SerializationFormat(enum.Enum):
    MARKDOWN = "markdown"
    JSON = "json"
    XML = "xml"
    YAML = "yaml"
    EVENT_LIST_RECENT_FIRST = "event_list_recent_first"
    EVENT_LIST_OLDEST_FIRST = "event_list_oldest_first"


class ValueClass(enum.Enum):
    LOW = "low"
    NORMAL = "normal"
    HIGH = "high"
    REJECTED = "rejected"
    # plausible value for a concept that has no normal range
    UNRATED = "unrated"


_MEASUREMENT_SECTIONS = frozenset({"body_metrics", "vital_signs", "lab_results"})


@dataclass(frozen=True)
class SerializationConfig:
    format: SerializationFormat = SerializationFormat.MARKDOWN
    timestamps_in_event_list: bool = True
    token_budget: int = 8192
    chars_per_token: float = 4.0
    time_window: Optional[timedelta] = None
    reference_mode: str = "fixed"  # "fixed" | "per_patient"
    fixed_reference_date: date = date(2024, 1, 1)
    # None = mode default: everything, except that per-patient reference mode
    # drops the measurement sections (body metrics, vitals, labs)
    components: Optional[frozenset[str]] = None
    values_per_concept: int = 3
    demographics: DemographicsConfig = field(default_factory=DemographicsConfig)
    # optional exact token counter; when set, truncation tightens until the
    # exact count fits the budget
    tokenizer: Optional[Callable[[str], int]] = None

    def __post_init__(self) -> None:
        if self.reference_mode not in ("fixed", "per_patient"):
            raise ValueError(f"bad reference_mode: {self.reference_mode!r}")
        if self.components is None:
            resolved = ALL_COMPONENTS
            if self.reference_mode == "per_patient":
                resolved = ALL_COMPONENTS - _MEASUREMENT_SECTIONS
            object.__setattr__(self, "components", resolved)
        else:
            object.__setattr__(self, "components", frozenset(self.components))
        unknown = self.components - ALL_COMPONENTS
        if unknown:
            raise ValueError(f"unknown components: {sorted(unknown)}")
        if not self.components:
            raise ValueError("components must be nonempty")
        if self.token_budget <= 0 or self.chars_per_token <= 0:
            raise ValueError("token budget and chars_per_token must be positive")


def serialization_config_from_dict(raw: Optional[dict]) -> SerializationConfig:
    """Build a SerializationConfig from a plain config-file mapping."""
    raw = dict(raw or {})
    kwargs: dict = {}
    if "format" in raw:
        kwargs["format"] = SerializationFormat(raw.pop("format"))
    if "time_window" in raw:
        name = raw.pop("time_window")
        if name not in TIME_WINDOWS:
            raise ValueError(f"unknown time window {name!r}; expected one of {sorted(TIME_WINDOWS)}")
        kwargs["time_window"] = TIME_WINDOWS[name]
    if "fixed_reference_date" in raw:
        kwargs["fixed_reference_date"] = date.fromisoformat(str(raw.pop("fixed_reference_date")))
    if "components" in raw:
        kwargs["components"] = frozenset(raw.pop("components"))
    for key in ("timestamps_in_event_list", "token_budget", "chars_per_token",
                "reference_mode", "values_per_concept"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ValueError(f"unknown serialization config keys: {sorted(raw)}")
    return SerializationConfig(**kwargs)


@dataclass
class SerializedRecord:
    text: str
    sections: dict[str, tuple[int, int]]
    token_estimate: int
    truncated: bool
    events_total: int
    events_included: int


def classify_value(spec: ConceptSpec, value: float) -> ValueClass:
    """Grade a numeric reading against the concept's plausibility and normal
    bounds. Plausibility and normal bounds are both inclusive."""
    if value < spec.min_valid or value > spec.max_valid:
        return ValueClass.REJECTED
    if not spec.has_normal_range:
        return ValueClass.UNRATED
    if value < spec.normal_low:
        return ValueClass.LOW
    if value > spec.normal_high:
        return ValueClass.HIGH
    return ValueClass.NORMAL


_QUANTA = {0: Decimal("1"), 1: Decimal("0.1"), 2: Decimal("0.01")}


def format_value(spec: ConceptSpec, value: float) -> str:
    """Round half-up to the concept's precision and append its unit."""
    dec = Decimal(str(value)).quantize(_QUANTA[spec.formatting.decimals], rounding=ROUND_HALF_UP)
    if dec == 0:
        dec = abs(dec)
    return f"{dec} {spec.unit}"


def day_offset(event_time: datetime, reference: datetime) -> int:
    """Whole days elapsed from event_time to reference (seconds floored)."""
    if event_time > reference:
        raise ValueError("event_time is after the reference moment")
    return int((reference - event_time).total_seconds() // 86400)


def normalize_date(event_time: datetime, reference: datetime) -> str:
    """Render a date with its distance to the reference, e.g.
    '2023-12-02 (30 days ago)'."""
    return f"{event_time.date().isoformat()} ({day_offset(event_time, reference)} days ago)"


def apply_time_window(
    events: list[ClinicalEvent], cutoff: datetime, window: Optional[timedelta]
) -> list[ClinicalEvent]:
    """Keep events with cutoff - window <= start < cutoff; an unbounded
    window only enforces the cutoff."""
    if window is None:
        return [ev for ev in events if ev.start < cutoff]
    lo = cutoff - window
    return [ev for ev in events if lo <= ev.start < cutoff]


@dataclass(frozen=True)
class ConceptReading:
    event: ClinicalEvent
    value: float


def aggregate_concepts(
    events: list[ClinicalEvent], table: ConceptTable, k: int
) -> dict[str, list[ConceptReading]]:
    """Collect the k most recent plausible readings per concept.

    Readings stay in chronological order (most recent last). Concepts with
    no plausible numeric reading are absent from the result.
    """
    collected: dict[str, list[ConceptReading]] = {}
    for ev in events:
        spec = table.canonical_concept(ev.code)
        if spec is None or not isinstance(ev.value, float):
            continue
        if classify_value(spec, ev.value) is ValueClass.REJECTED:
            continue
        collected.setdefault(spec.name, []).append(ConceptReading(ev, ev.value))
    return {name: readings[-k:] for name, readings in collected.items()}


def _format_generic(value: object) -> str:
    if isinstance(value, float):
        if value.is_integer():
            return str(int(value))
        return repr(value)
    return str(value)


def _reference_and_shift(cutoff: datetime, config: SerializationConfig) -> tuple[datetime, timedelta]:
    """The rendered reference moment and the shift applied to event times.

    Fixed mode slides the whole timeline so the cutoff lands on the fixed
    reference date; per-patient mode renders true dates against the cutoff.
    """
    if config.reference_mode == "fixed":
        ref = datetime.combine(config.fixed_reference_date, time(0, 0), tzinfo=timezone.utc)
        return ref, ref - cutoff
    return cutoff, timedelta(0)


def _category_of(ontology_name: str) -> str:
    if ontology_name in CONDITION_ONTOLOGIES:
        return "conditions"
    if ontology_name in MEDICATION_ONTOLOGIES:
        return "medications"
    if ontology_name in PROCEDURE_ONTOLOGIES:
        return "procedures"
    return "other"


_CATEGORY_COMPONENTS = ("conditions", "medications", "procedures")


def _grouped_entries(
    events: list[ClinicalEvent],
    ontology: OntologyIndex,
    components: frozenset[str],
    values_per_concept: int,
) -> dict[str, dict[str, list[str]]]:
    """Bucket events by category, then unique description with last-k values.

    Description order within a bucket is first occurrence time; values stay
    chronological. Category buckets gated by a disabled component are empty.
    """
    groups: dict[str, dict[str, list]] = {
        "conditions": {}, "medications": {}, "procedures": {}, "other": {}
    }
    for ev in events:
        category = _category_of(ev.ontology)
        if category in _CATEGORY_COMPONENTS and category not in components:
            continue
        desc = ontology.resolve(ev.code)
        if desc is None:
            continue
        values = groups[category].setdefault(desc, [])
        if ev.value is not None:
            values.append(ev.value)
    return {
        cat: {desc: [_format_generic(v) for v in vals[-values_per_concept:]] for desc, vals in entries.items()}
        for cat, entries in groups.items()
    }


def build_section_tree(
    patient: Patient,
    cutoff: datetime,
    config: SerializationConfig,
    ontology: OntologyIndex,
    concepts: ConceptTable,
) -> dict:
    """Assemble the nested section structure every renderer consumes."""
    reference, shift = _reference_and_shift(cutoff, config)
    pre_cutoff = events_before(patient, cutoff)
    windowed = apply_time_window(pre_cutoff, cutoff, config.time_window)

    def render_when(ev_time: datetime) -> str:
        return normalize_date(ev_time + shift, reference)

    tree: dict = {"header": {"reference_date": reference.date().isoformat()}}

    # Demographics are taken from the full pre-cutoff stream: age and sex do
    # not expire with the context window.
    if "demographics" in config.components:
        demo_lines: dict[str, str] = {}
        birth = patient.birth_datetime(config.demographics)
        if birth is not None and birth <= cutoff:
            demo_lines["Age"] = f"{age_in_years(birth, cutoff)} years"
        demo_codes = patient.demographic_codes(config.demographics)
        for kind, label in (("sex", "Sex"), ("race", "Race"), ("ethnicity", "Ethnicity")):
            code = demo_codes.get(kind)
            if code is not None:
                resolved = ontology.resolve(code)
                if resolved is not None:
                    demo_lines[label] = resolved
        if demo_lines:
            tree["demographics"] = demo_lines

    demo_cfg = config.demographics
    clinical = [
        ev for ev in windowed
        if demo_cfg.kind_of(ev.code) is None
    ]

    # Events matching an aggregated concept are routed to the aggregate
    # sections only; they never reappear in visit details or other events,
    # even when their section is disabled.
    aggregated = aggregate_concepts(
        [ev for ev in clinical if concepts.canonical_concept(ev.code) is not None],
        concepts,
        config.values_per_concept,
    )
    section_for_category = {
        ConceptCategory.BODY_METRIC: "body_metrics",
        ConceptCategory.VITAL_SIGN: "vital_signs",
        ConceptCategory.LAB_RESULT: "lab_results",
    }
    for category, section in section_for_category.items():
        if section not in config.components:
            continue
        entries: dict[str, list[str]] = {}
        for spec in concepts.in_category(category):
            readings = aggregated.get(spec.name)
            if not readings:
                continue
            rendered = []
            for reading in readings:
                klass = classify_value(spec, reading.value)
                offset = day_offset(reading.event.start + shift, reference)
                formatted = format_value(spec, reading.value)
                if klass is ValueClass.UNRATED:
                    rendered.append(f"{formatted} ({offset} days ago)")
                else:
                    rendered.append(f"{formatted} ({klass.value}, {offset} days ago)")
            entries[spec.name] = rendered
        if entries:
            tree[section] = entries

    remaining = [ev for ev in clinical if concepts.canonical_concept(ev.code) is None]

    # Past visits shown: started inside the window, or carrying at least one
    # windowed event. Newest first.
    windowed_visit_ids = {ev.visit_id for ev in remaining if ev.visit_id is not None}
    lo = cutoff - config.time_window if config.time_window is not None else None
    shown_visits = [
        v for v in patient.visits.values()
        if v.start < cutoff and ((lo is None or v.start >= lo) or v.visit_id in windowed_visit_ids)
    ]
    shown_visits.sort(key=lambda v: (v.start, v.visit_id), reverse=True)

    def visit_title(v: Visit) -> str:
        desc = ontology.resolve(v.type_code) or "Visit"
        shifted = v.start + shift
        offset = day_offset(shifted, reference)
        duration = ""
        if v.end is not None:
            days = (v.end - v.start).days
            if days > 0:
                duration = f", duration: {days} days"
        return f"{desc} on {shifted.date().isoformat()} ({offset} days ago{duration})"

    if "visit_summary" in config.components and shown_visits:
        tree["visit_summary"] = [visit_title(v) for v in shown_visits]

    non_visit = [ev for ev in remaining if ev.visit_id is None]
    other_entries = _grouped_entries(non_visit, ontology, config.components, config.values_per_concept)
    if any(other_entries.values()):
        tree["other_events"] = other_entries

    visit_blocks = []
    for v in shown_visits:
        inside = [
            ev for ev in remaining
            if ev.visit_id == v.visit_id and ev.source_table != "visit"
        ]
        groups = _grouped_entries(inside, ontology, config.components, config.values_per_concept)
        if not any(groups.values()):
            continue
        block: dict = {"title": visit_title(v)}
        block.update(groups)
        visit_blocks.append(block)
    if visit_blocks:
        tree["visits"] = visit_blocks

    return tree


_GROUP_HEADINGS = {
    "conditions": "Conditions",
    "medications": "Medications",
    "procedures": "Procedures",
    "other": "Other",
}


def _entry_lines(entries: dict[str, list[str]]) -> list[str]:
    lines = []
    for desc, values in entries.items():
        if values:
            lines.append(f"- {desc}: {', '.join(values)}")
        else:
            lines.append(f"- {desc}")
    return lines


def render_markdown(tree: dict) -> tuple[str, dict[str, tuple[int, int]]]:
    """Render the section tree to markdown, returning the text plus the
    character span of each section."""
    segments: list[tuple[str, str]] = []
    header_date = tree["header"]["reference_date"]
    segments.append(("header", f"# Patient Record\n\nReference date: {header_date}\n"))

    def bullet_section(name: str, heading: str, entries: dict[str, list[str]]) -> None:
        lines = [f"- {label}: {', '.join(vals)}" if isinstance(vals, list) else f"- {label}: {vals}"
                 for label, vals in entries.items()]
        segments.append((name, f"\n## {heading}\n\n" + "\n".join(lines) + "\n"))

    if "demographics" in tree:
        bullet_section("demographics", "Demographics", tree["demographics"])
    for section, heading in (
        ("body_metrics", "Recent Body Metrics"),
        ("vital_signs", "Recent Vital Signs"),
        ("lab_results", "Recent Lab Results"),
    ):
        if section in tree:
            bullet_section(section, heading, tree[section])
    if "visit_summary" in tree:
        body = "\n".join(f"- {title}" for title in tree["visit_summary"])
        segments.append(("visit_summary", f"\n## Visit Summary\n\n{body}\n"))
    if "other_events" in tree:
        lines: list[str] = []
        for cat in ("conditions", "medications", "procedures", "other"):
            lines.extend(_entry_lines(tree["other_events"][cat]))
        segments.append(("other_events", "\n## Other Medical Events\n\n" + "\n".join(lines) + "\n"))
    if "visits" in tree:
        parts = ["\n## Visit Details\n"]
        for block in tree["visits"]:
            parts.append(f"\n### {block['title']}\n")
            for cat in ("conditions", "medications", "procedures", "other"):
                if block[cat]:
                    parts.append(f"\n#### {_GROUP_HEADINGS[cat]}\n\n" + "\n".join(_entry_lines(block[cat])) + "\n")
        segments.append(("visit_details", "".join(parts)))

    text = ""
    spans: dict[str, tuple[int, int]] = {}
    for name, chunk in segments:
        spans[name] = (len(text), len(text) + len(chunk))
        text += chunk
    return text, spans


def _tree_to_xml(tree: dict) -> str:
    root = ET.Element("record")
    ET.SubElement(root, "header", reference_date=tree["header"]["reference_date"])

    def add_entries(parent: ET.Element, entries: dict[str, list[str]]) -> None:
        for desc, values in entries.items():
            el = ET.SubElement(parent, "entry", name=desc)
            for v in values:
                ET.SubElement(el, "value").text = v

    if "demographics" in tree:
        demo = ET.SubElement(root, "demographics")
        for label, val in tree["demographics"].items():
            ET.SubElement(demo, "entry", name=label).text = val
    for section in ("body_metrics", "vital_signs", "lab_results"):
        if section in tree:
            el = ET.SubElement(root, section)
            for name, readings in tree[section].items():
                concept = ET.SubElement(el, "concept", name=name)
                for r in readings:
                    ET.SubElement(concept, "reading").text = r
    if "visit_summary" in tree:
        el = ET.SubElement(root, "visit_summary")
        for title in tree["visit_summary"]:
            ET.SubElement(el, "visit").text = title
    if "other_events" in tree:
        el = ET.SubElement(root, "other_events")
        for cat in ("conditions", "medications", "procedures", "other"):
            cat_el = ET.SubElement(el, cat)
            add_entries(cat_el, tree["other_events"][cat])
    if "visits" in tree:
        el = ET.SubElement(root, "visits")
        for block in tree["visits"]:
            v_el = ET.SubElement(el, "visit", title=block["title"])
            for cat in ("conditions", "medications", "procedures", "other"):
                cat_el = ET.SubElement(v_el, cat)
                add_entries(cat_el, block[cat])
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def render_structured(tree: dict, fmt: SerializationFormat) -> str:
    if fmt is SerializationFormat.JSON:
        return json.dumps(tree, indent=2, ensure_ascii=False) + "\n"
    if fmt is SerializationFormat.YAML:
        return yaml.safe_dump(tree, sort_keys=False, allow_unicode=True)
    if fmt is SerializationFormat.XML:
        return _tree_to_xml(tree)
    raise ValueError(f"not a structured format: {fmt}")


def render_event_list(
    patient: Patient,
    cutoff: datetime,
    config: SerializationConfig,
    ontology: OntologyIndex,
) -> str:
    """One resolved event per line, optionally timestamped; order set by the
    configured format."""
    reference, shift = _reference_and_shift(cutoff, config)
    windowed = apply_time_window(events_before(patient, cutoff), cutoff, config.time_window)
    lines = []
    for ev in windowed:
        desc = ontology.resolve(ev.code)
        if desc is None:
            continue
        line = desc
        if ev.value is not None:
            line += f": {_format_generic(ev.value)}"
            if ev.unit:
                line += f" {ev.unit}"
        if config.timestamps_in_event_list:
            line = f"{normalize_date(ev.start + shift, reference)}: {line}"
        lines.append(line)
    if config.format is SerializationFormat.EVENT_LIST_RECENT_FIRST:
        lines.reverse()
    return "\n".join(lines) + ("\n" if lines else "")


def truncate_to_budget(text: str, config: SerializationConfig) -> tuple[str, bool]:
    """Hard tail cut to token_budget * chars_per_token characters; with an
    exact tokenizer configured, tighten until the count fits."""
    limit = int(config.token_budget * config.chars_per_token)
    truncated = False
    if len(text) > limit:
        text = text[:limit]
        truncated = True
    if config.tokenizer is not None:
        while text and config.tokenizer(text) > config.token_budget:
            over = config.tokenizer(text) / config.token_budget
            text = text[: min(len(text) - 1, int(len(text) / over))]
            truncated = True
    return text, truncated


def token_estimate(text: str, config: SerializationConfig) -> int:
    if config.tokenizer is not None:
        return config.tokenizer(text)
    return math.ceil(len(text) / config.chars_per_token)


def _clip_spans(spans: dict[str, tuple[int, int]], length: int) -> dict[str, tuple[int, int]]:
    clipped = {}
    for name, (a, b) in spans.items():
        if a >= length:
            continue
        clipped[name] = (a, min(b, length))
    return clipped


def serialize_markdown(
    patient: Patient,
    cutoff: datetime,
    config: SerializationConfig,
    ontology: OntologyIndex,
    concepts: ConceptTable,
    task_instruction: Optional[str] = None,
) -> SerializedRecord:
    """Serialize one patient as markdown at the given prediction cutoff.

    When task_instruction is passed it is prepended as a leading line; the
    standard pipeline sends instructions to providers separately instead.
    """
    tree = build_section_tree(patient, cutoff, config, ontology, concepts)
    text, spans = render_markdown(tree)
    if task_instruction:
        prefix = f"{task_instruction}\n\n"
        spans = {name: (a + len(prefix), b + len(prefix)) for name, (a, b) in spans.items()}
        spans["instruction"] = (0, len(prefix))
        text = prefix + text
    pre_cutoff = events_before(patient, cutoff)
    included = apply_time_window(pre_cutoff, cutoff, config.time_window)
    text, truncated = truncate_to_budget(text, config)
    return SerializedRecord(
        text=text,
        sections=_clip_spans(spans, len(text)),
        token_estimate=token_estimate(text, config),
        truncated=truncated,
        events_total=len(pre_cutoff),
        events_included=len(included),
    )


def serialize_alt(
    patient: Patient,
    cutoff: datetime,
    config: SerializationConfig,
    ontology: OntologyIndex,
    concepts: ConceptTable,
) -> SerializedRecord:
    """Serialize in one of the non-markdown formats."""
    if config.format in (
        SerializationFormat.EVENT_LIST_RECENT_FIRST,
        SerializationFormat.EVENT_LIST_OLDEST_FIRST,
    ):
        text = render_event_list(patient, cutoff, config, ontology)
        spans: dict[str, tuple[int, int]] = {"events": (0, len(text))}
    else:
        tree = build_section_tree(patient, cutoff, config, ontology, concepts)
        text = render_structured(tree, config.format)
        spans = {"record": (0, len(text))}
    pre_cutoff = events_before(patient, cutoff)
    included = apply_time_window(pre_cutoff, cutoff, config.time_window)
    text, truncated = truncate_to_budget(text, config)
    return SerializedRecord(
        text=text,
        sections=_clip_spans(spans, len(text)),
        token_estimate=token_estimate(text, config),
        truncated=truncated,
        events_total=len(pre_cutoff),
        events_included=len(included),
    )


def serialize_record(
    patient: Patient,
    cutoff: datetime,
    config: SerializationConfig,
    ontology: OntologyIndex,
    concepts: ConceptTable,
    task_instruction: Optional[str] = None,
) -> SerializedRecord:
    if config.format is SerializationFormat.MARKDOWN:
        return serialize_markdown(patient, cutoff, config, ontology, concepts, task_instruction)
    return serialize_alt(patient, cutoff, config, ontology, concepts)


def component_texts(
    patient: Patient,
    cutoff: datetime,
    config: SerializationConfig,
    ontology: OntologyIndex,
    concepts: ConceptTable,
) -> dict[str, str]:
    """Per-component rendered text in canonical order, for section-wise
    embedding. Disabled or empty components map to the empty string."""
    tree = build_section_tree(patient, cutoff, config, ontology, concepts)
    out = {name: "" for name in COMPONENT_ORDER}
    if "demographics" in tree:
        out["demographics"] = "\n".join(f"- {k}: {v}" for k, v in tree["demographics"].items())
    for section in ("body_metrics", "vital_signs", "lab_results"):
        if section in tree:
            out[section] = "\n".join(
                f"- {name}: {', '.join(vals)}" for name, vals in tree[section].items()
            )
    if "visit_summary" in tree:
        out["visit_summary"] = "\n".join(f"- {t}" for t in tree["visit_summary"])
    for cat in _CATEGORY_COMPONENTS:
        chunks: list[str] = []
        if "other_events" in tree:
            chunks.extend(_entry_lines(tree["other_events"][cat]))
        for block in tree.get("visits", ()):
            if block[cat]:
                chunks.append(f"{block['title']}:")
                chunks.extend(_entry_lines(block[cat]))
        out[cat] = "\n".join(chunks)
    # each component text honors the document budget on its own
    return {name: truncate_to_budget(text, config)[0] for name, text in out.items()}
