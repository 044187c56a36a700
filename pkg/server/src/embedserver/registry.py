"""Model registry: which models are loaded and how each one behaves.

Entries come from YAML so that Yes/No variant token sets and pooling modes
are deployment data, not code. The packaged models.yaml is the default
desk-scale registry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import yaml

POOLING_MODES = ("last_token", "mean_excluding_instruction")
KINDS = ("embedder", "decoder")


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class ModelEntry:
    model_id: str
    kind: str
    dim: int = 0
    pooling: str = "last_token"
    max_tokens: int = 512
    yes_variants: tuple[str, ...] = ()
    no_variants: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.model_id:
            raise RegistryError("model_id must be nonempty")
        if self.kind not in KINDS:
            raise RegistryError(f"{self.model_id}: unknown kind {self.kind!r}")
        if self.max_tokens <= 0:
            raise RegistryError(f"{self.model_id}: max_tokens must be positive")
        if self.kind == "embedder":
            if self.dim <= 0:
                raise RegistryError(f"{self.model_id}: embedder dim must be positive")
            if self.pooling not in POOLING_MODES:
                raise RegistryError(f"{self.model_id}: unknown pooling {self.pooling!r}")
        else:
            if not self.yes_variants or not self.no_variants:
                raise RegistryError(f"{self.model_id}: decoder needs both variant sets")
            overlap = set(self.yes_variants) & set(self.no_variants)
            if overlap:
                raise RegistryError(f"{self.model_id}: variants in both sets: {sorted(overlap)}")
            for name, variants in (("yes", self.yes_variants), ("no", self.no_variants)):
                if len(set(variants)) != len(variants):
                    raise RegistryError(f"{self.model_id}: duplicate {name} variants")


@dataclass
class Registry:
    entries: dict[str, ModelEntry] = field(default_factory=dict)

    def get(self, model_id: str) -> Optional[ModelEntry]:
        return self.entries.get(model_id)

    def ids(self) -> list[str]:
        return sorted(self.entries)

    @classmethod
    def from_entries(cls, entries: list[ModelEntry]) -> "Registry":
        out: dict[str, ModelEntry] = {}
        for entry in entries:
            if entry.model_id in out:
                raise RegistryError(f"duplicate model_id {entry.model_id!r}")
            out[entry.model_id] = entry
        return cls(out)

    @classmethod
    def from_yaml(cls, text: str) -> "Registry":
        doc = yaml.safe_load(text)
        if not isinstance(doc, dict) or not isinstance(doc.get("models"), list):
            raise RegistryError("registry YAML must be a mapping with a 'models' list")
        entries = []
        for row in doc["models"]:
            if not isinstance(row, dict):
                raise RegistryError(f"model row must be a mapping, got {type(row).__name__}")
            row = dict(row)
            for key in ("yes_variants", "no_variants"):
                if key in row:
                    values = row[key]
                    # YAML 1.1 reads bare Yes/No as booleans; insist on quotes
                    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
                        raise RegistryError(
                            f"{key} must be a list of strings (quote Yes/No in YAML)")
                    row[key] = tuple(values)
            unknown = set(row) - {f.name for f in ModelEntry.__dataclass_fields__.values()}
            if unknown:
                raise RegistryError(f"unknown model keys: {sorted(unknown)}")
            entries.append(ModelEntry(**row))
        return cls.from_entries(entries)


def default_registry() -> Registry:
    text = resources.files("embedserver").joinpath("models.yaml").read_text("utf-8")
    return Registry.from_yaml(text)
