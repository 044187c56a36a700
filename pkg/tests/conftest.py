"""Shared fixtures: the default concept table, a small ontology, and a
stub HTTP inference service. Plain builder helpers live in builders.py."""
from __future__ import annotations

import pytest

from ehrtext.ontology import OntologyIndex, default_concept_table

from stub_server import StubServer


@pytest.fixture(scope="session")
def concepts():
    return default_concept_table()


@pytest.fixture(scope="session")
def small_ontology() -> OntologyIndex:
    descriptions = [
        "SNOMED/1\tDiabetes mellitus",
        "SNOMED/2\tEssential hypertension",
        "SNOMED/3\tChronic kidney disease",
        "SNOMED/10\tMetabolic disease",
        "SNOMED/11\tKidney disease",
        "SNOMED/99\tClinical finding",
        "RxNorm/100\tMetformin 500mg tablet",
        "CPT4/200\tHemodialysis procedure",
        "LOINC/718-7\tHemoglobin measurement",
        "LOINC/8867-4\tHeart rate measurement",
        "Gender/F\tFemale",
        "Gender/M\tMale",
        "Race/1\tWhite",
        "Ethnicity/1\tNot Hispanic or Latino",
        "Visit/IP\tInpatient Visit",
        "Visit/OP\tOutpatient Visit",
        "SNOMED/3950001\tBirth",
    ]
    hierarchy = [
        "SNOMED/1\tSNOMED/10",
        "SNOMED/3\tSNOMED/11",
        "SNOMED/10\tSNOMED/99",
        "SNOMED/11\tSNOMED/99",
    ]
    return OntologyIndex.from_tsv(descriptions, hierarchy)


@pytest.fixture(scope="session")
def stub_service():
    with StubServer() as server:
        yield server
