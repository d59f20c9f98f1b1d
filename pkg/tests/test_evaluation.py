import numpy as np
import pytest

from crbjm.errors import NoCases
from crbjm.evaluation import (
    KaplanMeier,
    ScoredCohort,
    biomarker_accuracy,
    brier_cr,
    kfold_cv,
    stratified_folds,
    td_auc_cr,
)
from crbjm.simulation import GeneratorConfig, simulate_cohort


def scored(times, events, risks, s=0.0, delta=5.0, preds=None, meas=None):
    times = np.asarray(times, dtype=float)
    n = len(times)
    risks = np.asarray(risks, dtype=float)
    if risks.ndim == 1:
        risks = risks.reshape(-1, 1)
    preds = np.full((n, 1), np.nan) if preds is None else np.asarray(preds)
    if preds.ndim == 1:
        preds = preds.reshape(-1, 1)
    if meas is None:
        meas = tuple(((np.zeros(0), np.zeros(0)),) for _ in range(n))
    return ScoredCohort(s=s, delta=delta, ids=tuple(f"s{i}" for i in range(n)),
                        times=times, events=np.asarray(events, dtype=int),
                        risks=risks, predicted_values=preds, measurements=meas)


class TestAuc:
    def test_perfect_separation(self):
        sc = scored([1.0, 2.0, 9.0, 9.5], [1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1])
        assert td_auc_cr(sc, 1) == 1.0

    def test_all_ties(self):
        sc = scored([1.0, 2.0, 9.0, 9.5], [1, 1, 0, 0], [0.4, 0.4, 0.4, 0.4])
        assert td_auc_cr(sc, 1) == 0.5

    def test_flip_sign_maps_to_complement(self):
        rng = np.random.default_rng(0)
        risks = rng.uniform(size=8)
        sc1 = scored([1, 2, 3, 4, 9, 9, 9, 9], [1, 1, 1, 1, 0, 0, 0, 0], risks)
        sc2 = scored([1, 2, 3, 4, 9, 9, 9, 9], [1, 1, 1, 1, 0, 0, 0, 0], 1 - risks)
        assert td_auc_cr(sc1, 1) == pytest.approx(1.0 - td_auc_cr(sc2, 1), abs=1e-12)

    def test_six_subject_hand_enumeration(self):
        # one subject censored inside the window (t=3), one competing event
        times = np.array([1.0, 2.0, 3.0, 4.0, 9.0, 9.5])
        events = np.array([1, 2, 0, 1, 0, 0])
        risks = np.array([0.9, 0.6, 0.5, 0.7, 0.3, 0.1])
        sc = scored(times, events, risks, s=0.0, delta=5.0)
        got = td_auc_cr(sc, 1)

        # hand Kaplan-Meier of censoring: jumps at t=3 (1 of 4 at risk) and
        # t=9, 9.5; G(t-) for the case at 4.0 is 3/4
        # cases (type 1 in window): t=1 (w=1), t=4 (w=1/0.75)
        # controls: t=2 competing event (w=1), survivors t=9, 9.5 (w=1/G(5)=1/0.75)
        w_case = {0: 1.0, 3: 1.0 / 0.75}
        w_ctrl = {1: 1.0, 4: 1.0 / 0.75, 5: 1.0 / 0.75}
        num = den = 0.0
        for ci, wc in w_case.items():
            for li, wl in w_ctrl.items():
                conc = 1.0 if risks[ci] > risks[li] else (0.5 if risks[ci] == risks[li] else 0.0)
                num += wc * wl * conc
                den += wc * wl
        assert got == pytest.approx(num / den, abs=1e-12)

    def test_no_cases_raises(self):
        sc = scored([9.0, 9.5], [0, 0], [0.1, 0.2])
        with pytest.raises(NoCases):
            td_auc_cr(sc, 1)


class TestBrier:
    def test_direct_formula_uncensored(self):
        rng = np.random.default_rng(1)
        n = 10
        times = np.r_[rng.uniform(1, 4, 5), rng.uniform(6, 9, 5)]
        events = np.r_[np.ones(5, dtype=int), np.zeros(5, dtype=int)]
        events[5:] = 0
        times[5:] = 9.0  # survivors beyond the window
        risks = rng.uniform(size=n)
        sc = scored(times, events, risks)
        outcome = ((times <= 5.0) & (events == 1)).astype(float)
        assert brier_cr(sc, 1) == pytest.approx(np.mean((outcome - risks) ** 2), abs=1e-12)

    def test_zero_with_no_events_and_zero_prediction(self):
        sc = scored([9.0, 9.5, 10.0], [0, 0, 0], [0.0, 0.0, 0.0])
        assert brier_cr(sc, 1) == 0.0

    def test_calibration_sanity(self):
        rng = np.random.default_rng(2)
        n = 400
        times = np.where(rng.uniform(size=n) < 0.3, rng.uniform(0.5, 4.9, n), 9.0)
        events = (times < 5.0).astype(int)
        prev = events.mean()
        bs_prev = brier_cr(scored(times, events, np.full(n, prev)), 1)
        bs_zero = brier_cr(scored(times, events, np.zeros(n)), 1)
        bs_one = brier_cr(scored(times, events, np.ones(n)), 1)
        assert bs_prev <= bs_zero and bs_prev <= bs_one


class TestBiomarkerAccuracy:
    def test_perfect_predictions(self):
        meas = (((np.array([4.0]), np.array([10.0])),),
                ((np.array([4.5]), np.array([12.0])),))
        sc = scored([9.0, 9.0], [0, 0], [0.1, 0.1],
                    preds=np.array([[10.0], [12.0]]), meas=meas)
        rmse, p30, p50 = biomarker_accuracy(sc, 0)
        assert rmse == 0.0 and p30 == 1.0 and p50 == 1.0

    def test_inclusive_boundary(self):
        meas = (((np.array([4.0]), np.array([100.0])),),)
        sc = scored([9.0], [0], [0.1], preds=np.array([[130.0]]), meas=meas)
        rmse, p30, p50 = biomarker_accuracy(sc, 0)
        assert p30 == 1.0 and p50 == 1.0
        assert rmse == pytest.approx(30.0)

    def test_five_subject_hand_case(self):
        obs = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
        pred = np.array([12.0, 29.0, 30.0, 25.0, 80.0])
        meas = tuple(((np.array([4.0]), np.array([o])),) for o in obs)
        sc = scored([9.0] * 5, [0] * 5, [0.1] * 5, preds=pred.reshape(-1, 1), meas=meas)
        rmse, p30, p50 = biomarker_accuracy(sc, 0)
        err = pred - obs
        assert rmse == pytest.approx(np.sqrt(np.mean(err ** 2)))
        assert p30 == pytest.approx(np.mean(np.abs(err) <= 0.3 * obs))
        assert p50 == pytest.approx(np.mean(np.abs(err) <= 0.5 * obs))

    def test_closest_prior_measurement_used(self):
        meas = (((np.array([2.0, 4.2, 4.9]), np.array([1.0, 2.0, 3.0])),),)
        sc = scored([9.0], [0], [0.1], preds=np.array([[3.0]]), meas=meas)
        rmse, _, _ = biomarker_accuracy(sc, 0)
        assert rmse == 0.0  # compares against the latest in-window value


class TestKm:
    def test_against_hand_km(self):
        km = KaplanMeier([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0])
        assert km.survival(0.5) == 1.0
        assert km.survival(1.0) == pytest.approx(0.75)
        assert km.survival_left(1.0) == 1.0
        assert km.survival(3.0) == pytest.approx(0.75 * 0.5)


class TestKfold:
    def test_fold_accounting_leave_one_out(self):
        config = GeneratorConfig(n=10, seed=1)
        ds, _ = simulate_cohort(config)
        assign = stratified_folds(ds, 10, seed=4)
        # every subject lands in exactly one test fold, so it is scored once
        assert len(assign) == 10
        assert np.all((assign >= 0) & (assign < 10))
        union = np.concatenate([np.nonzero(assign == f)[0] for f in range(10)])
        np.testing.assert_array_equal(np.sort(union), np.arange(10))

    def test_determinism(self):
        config = GeneratorConfig(n=160, seed=9)
        ds, _ = simulate_cohort(config)
        r1, d1 = kfold_cv(ds, spec=config.spec(), k=2, landmarks=(1.0,), delta=2.0,
                          seed=11, method="cca")
        r2, d2 = kfold_cv(ds, spec=config.spec(), k=2, landmarks=(1.0,), delta=2.0,
                          seed=11, method="cca")
        assert r1.equals(r2)

    def test_prognostic_biomarkers_give_high_auc(self):
        config = GeneratorConfig(n=320, seed=13)
        ds, _ = simulate_cohort(config)
        report, _ = kfold_cv(ds, spec=config.spec(), k=2, landmarks=(1.0, 2.0),
                             delta=3.0, seed=5, method="cca")
        aucs = report[report["metric"] == "auc"][["year1", "year2"]].to_numpy()
        assert np.nanmean(aucs) > 0.75
