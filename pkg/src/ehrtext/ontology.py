"""Code resolution, concept metadata, and hierarchy expansion."""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Iterator, Mapping, Optional

# Ontologies whose codes cannot be resolved to text or carry a single
# constant value; their events are skipped entirely.
DEFAULT_EXCLUDED = frozenset(
    {
        "CARE_SITE",
        "ICDO3",
        "Domain",
        "Medicare Specialty",
        "CMS Place of Service",
        "OMOP Extension",
        "Condition Type",
    }
)

CONDITION_ONTOLOGIES = frozenset({"SNOMED", "Visit", "Cancer Modifier", "CVX", "HCPCS"})
MEDICATION_ONTOLOGIES = frozenset({"RxNorm", "RxNorm Extension"})
PROCEDURE_ONTOLOGIES = frozenset({"CPT4", "ICD10PCS", "ICD9Proc"})


class OntologyError(Exception):
    """Raised for malformed ontology inputs (bad rows, cycles, overlaps)."""


class Formatting(enum.Enum):
    INTEGER = "integer"
    ONE_DECIMAL = "one_decimal"
    TWO_DECIMALS = "two_decimals"

    @property
    def decimals(self) -> int:
        return {"integer": 0, "one_decimal": 1, "two_decimals": 2}[self.value]


class ConceptCategory(enum.Enum):
    BODY_METRIC = "body_metric"
    VITAL_SIGN = "vital_sign"
    LAB_RESULT = "lab_result"


@dataclass(frozen=True)
class ConceptSpec:
    """Display metadata for one aggregated numeric concept."""

    name: str
    codes: tuple[str, ...]
    unit: str
    min_valid: float
    max_valid: float
    normal_low: Optional[float]
    normal_high: Optional[float]
    formatting: Formatting
    category: ConceptCategory

    @property
    def has_normal_range(self) -> bool:
        return self.normal_low is not None and self.normal_high is not None


class ConceptTable:
    """The ordered list of aggregated concepts plus a code lookup.

    Load-time validation guarantees that no code belongs to two concepts,
    so canonical_concept is a well-defined partial function.
    """

    def __init__(self, specs: Iterable[ConceptSpec]):
        self.specs: tuple[ConceptSpec, ...] = tuple(specs)
        self.by_code: dict[str, ConceptSpec] = {}
        for spec in self.specs:
            for code in spec.codes:
                if code in self.by_code:
                    raise OntologyError(f"code {code} mapped to two concepts")
                self.by_code[code] = spec

    def canonical_concept(self, code: str) -> Optional[ConceptSpec]:
        return self.by_code.get(code)

    def in_category(self, category: ConceptCategory) -> list[ConceptSpec]:
        return [s for s in self.specs if s.category == category]


def parse_concept_table(lines: Iterable[str]) -> ConceptTable:
    rows = [ln.rstrip("\n") for ln in lines if ln.strip()]
    header = rows[0].split("\t")
    expected = [
        "category", "name", "codes", "unit", "min_valid", "max_valid",
        "normal_low", "normal_high", "formatting",
    ]
    if header != expected:
        raise OntologyError(f"concept table header mismatch: {header}")
    specs = []
    for row in rows[1:]:
        cells = row.split("\t")
        if len(cells) != len(expected):
            raise OntologyError(f"concept row has {len(cells)} cells: {row!r}")
        cat, name, codes, unit, lo, hi, nlo, nhi, fmt = cells
        specs.append(
            ConceptSpec(
                name=name,
                codes=tuple(codes.split("|")),
                unit=unit,
                min_valid=float(lo),
                max_valid=float(hi),
                normal_low=float(nlo) if nlo else None,
                normal_high=float(nhi) if nhi else None,
                formatting=Formatting(fmt),
                category=ConceptCategory(cat),
            )
        )
    return ConceptTable(specs)


def default_concept_table() -> ConceptTable:
    text = resources.files("ehrtext.data").joinpath("concepts.tsv").read_text("utf-8")
    return parse_concept_table(text.splitlines())


def _check_acyclic(parents: Mapping[str, frozenset[str]]) -> None:
    # Iterative three-color DFS over the child->parent graph.
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[str, int] = {}
    for root in parents:
        if color.get(root, WHITE) != WHITE:
            continue
        stack: list[tuple[str, Iterator]] = [(root, iter(parents.get(root, ())))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                state = color.get(nxt, WHITE)
                if state == GRAY:
                    raise OntologyError(f"hierarchy cycle through {nxt}")
                if state == WHITE:
                    color[nxt] = GRAY
                    stack.append((nxt, iter(parents.get(nxt, ()))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()


class OntologyIndex:
    """Maps codes to display text and parent codes.

    resolve() is total: excluded ontologies yield None (skip), described
    codes yield their description, and everything else falls back to
    'ONTOLOGY code CODE'.
    """

    def __init__(
        self,
        descriptions: Mapping[str, str],
        parents: Mapping[str, frozenset[str]],
        excluded_ontologies: frozenset[str] = DEFAULT_EXCLUDED,
    ):
        self.descriptions = dict(descriptions)
        self.parents = {c: frozenset(p) for c, p in parents.items()}
        self.excluded_ontologies = excluded_ontologies
        self.supported_ontologies = frozenset(
            code.split("/", 1)[0] for code in self.descriptions
        )
        overlap = self.supported_ontologies & self.excluded_ontologies
        if overlap:
            raise OntologyError(f"ontologies both described and excluded: {sorted(overlap)}")
        _check_acyclic(self.parents)

    @classmethod
    def empty(cls) -> "OntologyIndex":
        return cls({}, {})

    @classmethod
    def from_tsv(
        cls,
        description_lines: Iterable[str],
        hierarchy_lines: Iterable[str] = (),
        excluded_ontologies: frozenset[str] = DEFAULT_EXCLUDED,
    ) -> "OntologyIndex":
        """description rows: CODE<TAB>text; hierarchy rows: CHILD<TAB>PARENT."""
        descriptions: dict[str, str] = {}
        for ln in description_lines:
            if not ln.strip():
                continue
            parts = ln.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise OntologyError(f"bad description row: {ln!r}")
            descriptions[parts[0]] = parts[1]
        parents: dict[str, set[str]] = {}
        for ln in hierarchy_lines:
            if not ln.strip():
                continue
            parts = ln.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise OntologyError(f"bad hierarchy row: {ln!r}")
            child, parent = parts
            parents.setdefault(child, set()).add(parent)
        return cls(descriptions, {c: frozenset(p) for c, p in parents.items()}, excluded_ontologies)

    def resolve(self, code: str) -> Optional[str]:
        ontology, _, local = code.partition("/")
        if ontology in self.excluded_ontologies:
            return None
        described = self.descriptions.get(code)
        if described is not None:
            return described
        return f"{ontology} code {local}"

    def expand(self, counts: Mapping[str, int]) -> Counter:
        """Add direct parents and grandparents to a code multiset.

        Each occurrence of a code contributes one occurrence of every parent
        and one per parent-of-parent path, so shared grandparents accumulate
        multiplicity through each path.
        """
        out: Counter = Counter()
        for code, n in counts.items():
            out[code] += n
            for parent in sorted(self.parents.get(code, ())):
                out[parent] += n
                for grand in sorted(self.parents.get(parent, ())):
                    out[grand] += n
        return out
