"""Count featurizer tests: interval tallies against a cumulative oracle,
hierarchy expansion multiplicity, support filtering, demographics columns,
and config parsing."""
from __future__ import annotations

from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrtext.counts import (
    DEFAULT_INTERVALS,
    ConfigError,
    CountFeatureSpace,
    CountsConfig,
    add_demographics,
    build_feature_space,
    count_vector,
    counts_config_from_dict,
    featurize_instances,
)
from ehrtext.events import PredictionInstance
from ehrtext.ontology import OntologyIndex

from builders import dt, ev, make_patient
from oracles import count_in_intervals

FLAT = OntologyIndex.from_tsv(
    ["SNOMED/1\tA", "SNOMED/2\tB", "SNOMED/3\tC", "Gender/F\tFemale",
     "SNOMED/3950001\tBirth"],
    [],
)
# SNOMED/10 is a child of SNOMED/99 twice over (diamond through 11 and 12)
DIAMOND = OntologyIndex.from_tsv(
    ["SNOMED/10\tLeaf", "SNOMED/11\tMidA", "SNOMED/12\tMidB", "SNOMED/99\tRoot"],
    ["SNOMED/10\tSNOMED/11", "SNOMED/10\tSNOMED/12",
     "SNOMED/11\tSNOMED/99", "SNOMED/12\tSNOMED/99"],
)

CUTOFF = dt(2023, 6, 1, hour=12)


def _patient(day_offsets, code="SNOMED/1", pid="p1"):
    events = [ev(CUTOFF - timedelta(days=o), code) for o in day_offsets]
    return make_patient(pid, events)


def _space(codes, intervals=DEFAULT_INTERVALS):
    return CountFeatureSpace(intervals=intervals, codes=tuple(sorted(codes)))


class TestCountVector:
    def test_intervals_are_cumulative(self):
        patient = _patient([0.5, 3, 20, 100, 800, 2000])
        space = _space(["SNOMED/1"])
        vec = count_vector(patient, CUTOFF, space, FLAT)
        # 1d, 7d, 30d, 365d, 1095d, unbounded
        assert vec.tolist() == [1, 2, 3, 4, 5, 6]

    def test_matches_interval_oracle(self):
        offsets = [0.2, 0.9, 1.5, 6.0, 29.0, 31.0, 400.0]
        patient = _patient(offsets)
        space = _space(["SNOMED/1"])
        vec = count_vector(patient, CUTOFF, space, FLAT)
        days = [1, 7, 30, 365, 1095, None]
        assert vec.tolist() == count_in_intervals(offsets, days)

    @given(st.lists(st.floats(min_value=0.001, max_value=3000), max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_oracle_property(self, offsets):
        patient = _patient(offsets)
        space = _space(["SNOMED/1"])
        vec = count_vector(patient, CUTOFF, space, FLAT)
        days = [1, 7, 30, 365, 1095, None]
        assert vec.tolist() == count_in_intervals(offsets, days)
        # wider intervals can only accumulate more
        assert all(a <= b for a, b in zip(vec, vec[1:]))

    def test_boundary_event_counts_inside(self):
        # age exactly equal to the interval length is included (age > iv
        # excludes), and events at the cutoff are excluded entirely
        patient = make_patient("p1", [
            ev(CUTOFF - timedelta(days=1), "SNOMED/1"),
            ev(CUTOFF, "SNOMED/1"),
        ])
        space = _space(["SNOMED/1"], intervals=(timedelta(days=1), None))
        assert count_vector(patient, CUTOFF, space, FLAT).tolist() == [1, 1]

    def test_values_ignored(self):
        a = make_patient("p1", [ev(CUTOFF - timedelta(days=2), "SNOMED/1", value=5.0)])
        b = make_patient("p1", [ev(CUTOFF - timedelta(days=2), "SNOMED/1", value=99.0)])
        space = _space(["SNOMED/1"])
        assert np.array_equal(
            count_vector(a, CUTOFF, space, FLAT), count_vector(b, CUTOFF, space, FLAT)
        )

    def test_codes_outside_vocabulary_dropped(self):
        patient = make_patient("p1", [
            ev(CUTOFF - timedelta(days=2), "SNOMED/1"),
            ev(CUTOFF - timedelta(days=2), "SNOMED/2"),
        ])
        space = _space(["SNOMED/1"])
        # the kept event is 2 days old: it hits every interval except 1d
        assert count_vector(patient, CUTOFF, space, FLAT).sum() == 5

    def test_diamond_expansion_multiplicity(self):
        patient = make_patient("p1", [ev(CUTOFF - timedelta(days=2), "SNOMED/10")])
        space = _space(
            ["SNOMED/10", "SNOMED/11", "SNOMED/12", "SNOMED/99"], intervals=(None,)
        )
        vec = count_vector(patient, CUTOFF, space, DIAMOND)
        by_code = dict(zip(space.codes, vec))
        assert by_code["SNOMED/10"] == 1
        assert by_code["SNOMED/11"] == 1
        assert by_code["SNOMED/12"] == 1
        # two distinct paths reach the root, so it counts twice
        assert by_code["SNOMED/99"] == 2


class TestFeatureSpace:
    def test_column_layout_interval_major(self):
        space = _space(["SNOMED/1", "SNOMED/2"], intervals=(timedelta(days=7), None))
        assert space.width == 4
        assert space.column(0, "SNOMED/1") == 0
        assert space.column(0, "SNOMED/2") == 1
        assert space.column(1, "SNOMED/1") == 2
        assert space.column(1, "SNOMED/2") == 3
        assert space.column(0, "SNOMED/9") is None

    def test_feature_names(self):
        space = _space(["SNOMED/1"], intervals=(timedelta(hours=1), timedelta(days=30), None))
        assert space.feature_names() == ["1h:SNOMED/1", "30d:SNOMED/1", "all:SNOMED/1"]


def _cohort(n_with_code2=3):
    patients = {}
    instances = []
    for i in range(5):
        pid = f"p{i}"
        events = [ev(CUTOFF - timedelta(days=3), "SNOMED/1")]
        if i < n_with_code2:
            events.append(ev(CUTOFF - timedelta(days=4), "SNOMED/2"))
        patients[pid] = make_patient(pid, events)
        instances.append(PredictionInstance(pid, "anemia", CUTOFF, i % 2))
    return patients, instances


class TestBuildFeatureSpace:
    def test_support_filter(self):
        patients, instances = _cohort(n_with_code2=3)
        space = build_feature_space(
            patients, instances, FLAT, CountsConfig(min_patient_support=4)
        )
        assert space.codes == ("SNOMED/1",)
        wide = build_feature_space(
            patients, instances, FLAT, CountsConfig(min_patient_support=3)
        )
        assert wide.codes == ("SNOMED/1", "SNOMED/2")

    def test_support_counts_patients_not_events(self):
        # one patient with many occurrences still counts once
        patients = {"p0": make_patient("p0", [
            ev(CUTOFF - timedelta(days=d), "SNOMED/1") for d in range(1, 9)
        ])}
        instances = [PredictionInstance("p0", "anemia", CUTOFF, 1)]
        with pytest.raises(ConfigError):
            build_feature_space(patients, instances, FLAT, CountsConfig(min_patient_support=2))

    def test_vocabulary_sees_only_pre_cutoff_events(self):
        patients = {"p0": make_patient("p0", [ev(CUTOFF + timedelta(days=1), "SNOMED/1")]),
                    "p1": make_patient("p1", [ev(CUTOFF - timedelta(days=1), "SNOMED/2")])}
        instances = [PredictionInstance("p0", "anemia", CUTOFF, 1),
                     PredictionInstance("p1", "anemia", CUTOFF, 0)]
        space = build_feature_space(patients, instances, FLAT, CountsConfig(min_patient_support=1))
        assert space.codes == ("SNOMED/2",)

    def test_expansion_enters_the_vocabulary(self):
        patients = {"p0": make_patient("p0", [ev(CUTOFF - timedelta(days=1), "SNOMED/10")])}
        instances = [PredictionInstance("p0", "anemia", CUTOFF, 1)]
        space = build_feature_space(
            patients, instances, DIAMOND, CountsConfig(min_patient_support=1)
        )
        assert space.codes == ("SNOMED/10", "SNOMED/11", "SNOMED/12", "SNOMED/99")

    def test_empty_vocabulary_rejected(self):
        patients, instances = _cohort()
        with pytest.raises(ConfigError):
            build_feature_space(patients, instances, FLAT, CountsConfig(min_patient_support=50))


class TestDemographics:
    def _patient_with_person(self, sex="Gender/F", birth_year=1983):
        events = [
            ev(dt(birth_year, 6, 1), "SNOMED/3950001", source_table="person"),
            ev(dt(birth_year, 6, 1), sex, source_table="person"),
            ev(CUTOFF - timedelta(days=1), "SNOMED/1"),
        ]
        return make_patient("p1", events)

    def test_appends_exactly_three(self):
        patient = self._patient_with_person()
        out = add_demographics(np.zeros(4), patient, CUTOFF)
        assert out.shape == (7,)
        assert out[4] == pytest.approx(0.40)  # age 40 / 100
        assert out[5] == 1.0  # female
        assert out[6] == 0.0  # nothing missing

    def test_missing_birth_flags_indicator(self):
        patient = make_patient("p1", [
            ev(dt(1980, 1, 1), "Gender/F", source_table="person"),
            ev(CUTOFF - timedelta(days=1), "SNOMED/1"),
        ])
        out = add_demographics(np.zeros(1), patient, CUTOFF)
        assert out[1] == 0.0 and out[3] == 1.0

    def test_unrecognized_sex_flags_indicator(self):
        patient = self._patient_with_person(sex="Gender/X")
        out = add_demographics(np.zeros(1), patient, CUTOFF)
        assert out[3] == 1.0


class TestFeaturizeInstances:
    def test_rows_follow_instance_order(self):
        patients, instances = _cohort()
        space = build_feature_space(patients, instances, FLAT, CountsConfig(min_patient_support=1))
        keys, X, y = featurize_instances(patients, instances, space, FLAT)
        assert keys == [i.instance_key for i in instances]
        assert X.shape == (5, space.width + 3)
        assert y.tolist() == [i.label for i in instances]

    def test_empty_instances(self):
        patients, _ = _cohort()
        space = _space(["SNOMED/1"])
        keys, X, y = featurize_instances(patients, [], space, FLAT)
        assert keys == [] and X.shape == (0, space.width + 3) and y.size == 0


class TestCountsConfig:
    def test_interval_order_enforced(self):
        with pytest.raises(ConfigError):
            CountsConfig(intervals=(timedelta(days=7), timedelta(days=1)))
        with pytest.raises(ConfigError):
            CountsConfig(intervals=(None, timedelta(days=1)))
        with pytest.raises(ConfigError):
            CountsConfig(intervals=())

    def test_from_dict(self):
        cfg = counts_config_from_dict(
            {"intervals": ["12h", "7d", "unbounded"], "min_patient_support": 5}
        )
        assert cfg.intervals == (timedelta(hours=12), timedelta(days=7), None)
        assert cfg.min_patient_support == 5
        assert counts_config_from_dict(None) == CountsConfig()

    def test_from_dict_rejects_garbage(self):
        with pytest.raises(ConfigError):
            counts_config_from_dict({"intervals": ["7w"]})
        with pytest.raises(ConfigError):
            counts_config_from_dict({"mystery": 1})

    def test_default_intervals_pinned(self):
        assert DEFAULT_INTERVALS == (
            timedelta(days=1), timedelta(days=7), timedelta(days=30),
            timedelta(days=365), timedelta(days=1095), None,
        )
