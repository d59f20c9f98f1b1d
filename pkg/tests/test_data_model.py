import numpy as np
import pandas as pd
import pytest

from crbjm.data import (
    Dataset,
    Subject,
    T_ZERO_SHIFT,
    export_dataset,
    history_from_subject,
    load_dataset,
    split_lts,
)
from crbjm.errors import (
    DuplicateMeasurement,
    EventTypeOutOfRange,
    MeasurementAfterExit,
    MissingSubject,
    SchemaError,
)


def write_cohort(tmp_path, subj_rows, long_rows):
    sp = tmp_path / "subjects.csv"
    lp = tmp_path / "long.csv"
    pd.DataFrame(subj_rows).to_csv(sp, index=False)
    pd.DataFrame(long_rows, columns=["id", "biomarker", "time", "value"]).to_csv(lp, index=False)
    return sp, lp


def two_subject_files(tmp_path):
    subj = [
        {"id": "a", "time": 4.0, "event": 0, "age": 60.0},
        {"id": "b", "time": 6.0, "event": 1, "age": 55.0},
    ]
    long = [
        {"id": "a", "biomarker": "gfr", "time": t, "value": v}
        for t, v in [(1.0, 50.0), (2.0, 48.0), (3.0, 47.0)]
    ] + [
        {"id": "b", "biomarker": "gfr", "time": t, "value": v}
        for t, v in [(1.0, 40.0), (2.5, 34.0), (5.0, 30.0)]
    ]
    return write_cohort(tmp_path, subj, long)


class TestLoad:
    def test_minimal_wellformed(self, tmp_path):
        sp, lp = two_subject_files(tmp_path)
        ds = load_dataset(sp, lp)
        assert ds.n == 2
        assert ds.n_event_types == 1
        assert ds.covariate_names == ("age",)
        assert ds.subjects[0].measurements[0][0].tolist() == [1.0, 2.0, 3.0]

    def test_measurement_after_exit_rejected(self, tmp_path):
        subj = [{"id": "a", "time": 4.0, "event": 1, "age": 60.0}]
        long = [{"id": "a", "biomarker": "gfr", "time": 5.0, "value": 30.0}]
        sp, lp = write_cohort(tmp_path, subj, long)
        with pytest.raises(MeasurementAfterExit):
            load_dataset(sp, lp)

    def test_zero_measurements_accepted(self, tmp_path):
        subj = [{"id": "a", "time": 4.0, "event": 1, "age": 60.0},
                {"id": "b", "time": 2.0, "event": 0, "age": 50.0}]
        long = [{"id": "a", "biomarker": "gfr", "time": 1.0, "value": 50.0}]
        sp, lp = write_cohort(tmp_path, subj, long)
        ds = load_dataset(sp, lp)
        b = ds.subjects[1]
        assert b.n_measurements == 0

    def test_unknown_subject_rejected(self, tmp_path):
        subj = [{"id": "a", "time": 4.0, "event": 1, "age": 60.0}]
        long = [{"id": "zz", "biomarker": "gfr", "time": 1.0, "value": 50.0}]
        sp, lp = write_cohort(tmp_path, subj, long)
        with pytest.raises(MissingSubject):
            load_dataset(sp, lp)

    def test_duplicate_measurement_rejected(self, tmp_path):
        subj = [{"id": "a", "time": 4.0, "event": 1, "age": 60.0}]
        long = [{"id": "a", "biomarker": "gfr", "time": 1.0, "value": 50.0},
                {"id": "a", "biomarker": "gfr", "time": 1.0, "value": 51.0}]
        sp, lp = write_cohort(tmp_path, subj, long)
        with pytest.raises(DuplicateMeasurement):
            load_dataset(sp, lp)

    def test_event_type_out_of_range(self, tmp_path):
        subj = [{"id": "a", "time": 4.0, "event": 3, "age": 60.0}]
        sp, lp = write_cohort(tmp_path, subj, [])
        with pytest.raises(EventTypeOutOfRange):
            load_dataset(sp, lp, schema={"n_event_types": 2, "biomarkers": ["gfr"]})

    def test_time_zero_shifted(self, tmp_path):
        subj = [{"id": "a", "time": 4.0, "event": 1, "age": 60.0}]
        long = [{"id": "a", "biomarker": "gfr", "time": 0.0, "value": 50.0}]
        sp, lp = write_cohort(tmp_path, subj, long)
        ds = load_dataset(sp, lp)
        assert ds.subjects[0].measurements[0][0][0] == T_ZERO_SHIFT

    def test_tau_max_override_below_event_rejected(self, tmp_path):
        sp, lp = two_subject_files(tmp_path)
        with pytest.raises(SchemaError):
            load_dataset(sp, lp, schema={"tau_max": 5.0})

    def test_roundtrip(self, tmp_path):
        sp, lp = two_subject_files(tmp_path)
        ds = load_dataset(sp, lp)
        sp2, lp2 = tmp_path / "s2.csv", tmp_path / "l2.csv"
        export_dataset(ds, sp2, lp2)
        ds2 = load_dataset(sp2, lp2)
        assert ds2.n == ds.n
        for a, b in zip(ds.subjects, ds2.subjects):
            assert a.id == b.id
            assert a.observed_time == b.observed_time
            assert a.event_type == b.event_type
            np.testing.assert_array_equal(a.covariates, b.covariates)
            for (t1, v1), (t2, v2) in zip(a.measurements, b.measurements):
                np.testing.assert_array_equal(t1, t2)
                np.testing.assert_array_equal(v1, v2)


def make_subject(sid, time, event, p=1):
    return Subject(id=sid, covariates=np.zeros(p), observed_time=time,
                   event_type=event, measurements=((np.zeros(0), np.zeros(0)),))


def make_dataset(subjects, tau):
    return Dataset(subjects=tuple(subjects), n_event_types=2, n_biomarkers=1,
                   covariate_names=("v1",), biomarker_names=("y1",), tau_max=tau)


class TestSplitLts:
    def test_boundaries(self):
        tau = 10.0
        ds = make_dataset([
            make_subject("lts", tau + 0.1, 0),
            make_subject("cens", tau - 0.1, 0),
            make_subject("event", tau - 0.1, 2),
        ], tau)
        non_lts, lts, cens = split_lts(ds)
        assert lts.tolist() == [0]
        assert cens.tolist() == [1]
        assert non_lts.tolist() == [2]

    def test_censored_exactly_at_tau_is_lts(self):
        # administrative censoring at tau_max proves survival past tau_max
        ds = make_dataset([make_subject("admin", 10.0, 0),
                           make_subject("event-at-tau", 10.0, 1)], 10.0)
        non_lts, lts, cens = split_lts(ds)
        assert lts.tolist() == [0]
        assert non_lts.tolist() == [1]

    def test_partition_property(self):
        rng = np.random.default_rng(2)
        subs = [make_subject(f"s{i}", float(rng.uniform(0.5, 20)),
                             int(rng.integers(0, 3) if rng.uniform() < 0.9 else 0))
                for i in range(200)]
        tau = max(s.observed_time for s in subs if s.event_type != 0)
        ds = make_dataset(subs, tau)
        non_lts, lts, cens = split_lts(ds)
        all_idx = np.sort(np.concatenate([non_lts, lts, cens]))
        np.testing.assert_array_equal(all_idx, np.arange(200))


class TestHistory:
    def test_truncation(self):
        s = Subject(id="a", covariates=np.array([1.0]), observed_time=6.0, event_type=0,
                    measurements=((np.array([1.0, 2.0, 5.0]), np.array([5.0, 4.0, 3.0])),))
        h = history_from_subject(s, 2.5)
        assert h.measurements[0][0].tolist() == [1.0, 2.0]
        assert h.prediction_time == 2.5
