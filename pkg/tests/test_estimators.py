import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tspr.errors import BootstrapError, DataError, EstimationError
from tspr.estimators import (
    DegenerateMarketWarning,
    EstimateReport,
    NaiveRecords,
    TsprRecords,
    bootstrap_se,
    estimate_naive_is,
    estimate_tspr,
    estimate_ybar0,
    naive_theta,
    naive_with_se,
    partial_outcome,
    read_item_outcomes,
    tspr_theta,
    tspr_with_se,
    write_item_outcomes,
)
from tspr.marketplace import Arm, NqSpec, UtilityDist
from tspr.behavior import TreatmentSpec
from tspr.simulate import BehaviorModel, Market, simulate


def records(arm, l, y_partial, y_total=None):
    y_partial = np.asarray(y_partial, dtype=float)
    y_total = y_partial if y_total is None else y_total
    return TsprRecords(np.full(len(l), arm), l, y_total, y_partial)


@pytest.fixture(scope="module")
def experiment():
    market = Market.draw(20_000, np.random.default_rng(1), UtilityDist("normal", 1.0, 1.0), p=0.25)
    b = simulate(market, 4_000, NqSpec.fixed(15), 4.0, BehaviorModel(), TreatmentSpec(0.3), 2,
                 ranker="tspr", policy="assigned", r_min=0.0)
    naive = simulate(market, 4_000, NqSpec.fixed(15), 4.0, BehaviorModel(), TreatmentSpec(0.3), 3,
                     policy="assigned")
    return b, TsprRecords.from_batch(b), NaiveRecords.from_batch(naive)


def test_partial_outcome():
    assert partial_outcome([0, 1, 0], 2) == 1
    assert partial_outcome([0, 1, 0], 0) == 0
    with pytest.raises(ValueError):
        partial_outcome([0, 1], 3)


@given(st.lists(st.floats(0, 5), max_size=20))
def test_partial_outcome_monotone(y):
    vals = [partial_outcome(y, l) for l in range(len(y) + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_ybar0():
    assert estimate_ybar0(np.array([1, 0, 1, 0])) == 0.5
    with pytest.raises(EstimationError):
        estimate_ybar0(np.array([]))


def test_single_stratum_value():
    a = records(Arm.A, [2, 2], [0.5, 0.5])
    b = records(Arm.B, [2, 2, 2, 2, 2], [0.4] * 5)
    rep = estimate_tspr(a, b, 0.7)
    assert abs(rep.theta_hat - (-0.14)) <= 1e-12
    assert [s.weight for s in rep.strata] == [1.0]
    assert rep.method == "tspr" and rep.ybar0 == 0.7


def test_two_strata_weights():
    a = records(Arm.A, [1, 1, 1, 2, 2], [1.0, 0.0, 1.0, 1.0, 0.0])
    b = records(Arm.B, [1, 2, 2], [1.0, 0.0, 1.0])
    rep = estimate_tspr(a, b, 0.6)
    assert [(s.l, s.n_A, s.n_B) for s in rep.strata] == [(1, 3, 1), (2, 2, 2)]
    assert [s.weight for s in rep.strata] == [4 / 8, 4 / 8]
    # hand evaluation: l=1 mA=2/3 mB=1; l=2 mA=1/2 mB=1/2
    expected = 0.5 * 0.6 * (1 - 2 / 3) / (2 / 3) + 0.5 * 0.0
    assert abs(rep.theta_hat - expected) <= 1e-12


def test_identical_arms_zero():
    a = records(Arm.A, [1, 2, 3, 3], [0.2, 0.5, 1.0, 0.0])
    b = records(Arm.B, [1, 2, 3, 3], [0.2, 0.5, 0.0, 1.0])
    assert estimate_tspr(a, b, 0.8).theta_hat == 0.0


def test_drop_rules_and_diagnostics():
    a = records(Arm.A, [0, 1, 1, 2, 3], [0.0, 1.0, 0.0, 0.0, 1.0])
    b = records(Arm.B, [0, 1, 2, 4], [0.0, 1.0, 1.0, 1.0])
    rep = estimate_tspr(a, b, 0.5)
    # l=2 has zero arm-A mean, l=3 and l=4 sit in one arm only
    assert [s.l for s in rep.strata] == [1]
    assert rep.n_dropped_strata == 3
    assert rep.strata[0].raw_weight == 3 / 9
    assert rep.diagnostics["l0_mass"] == 2 / 9
    assert rep.diagnostics["L"] == 1
    assert rep.diagnostics["n_strata_zero_mean"] == 1
    assert rep.diagnostics["n_strata_one_arm"] == 2


def test_min_stratum():
    a = records(Arm.A, [1, 2, 2], [1.0, 1.0, 1.0])
    b = records(Arm.B, [1, 2, 2], [0.0, 0.5, 0.5])
    assert [s.l for s in estimate_tspr(a, b, 1.0, min_stratum=2).strata] == [2]


def test_no_strata_is_an_error():
    a = records(Arm.A, [0, 3], [0.0, 1.0])
    b = records(Arm.B, [1], [1.0])
    with pytest.raises(EstimationError):
        estimate_tspr(a, b, 0.5)
    with pytest.raises(EstimationError):
        tspr_theta(a, b, 0.5)


def test_zero_baseline_warns():
    a = records(Arm.A, [1], [0.0])
    b = records(Arm.B, [1], [0.0])
    with pytest.warns(DegenerateMarketWarning):
        rep = estimate_tspr(a, b, 0.0)
    assert rep.theta_hat == 0.0


def test_record_validation():
    with pytest.raises(DataError):
        TsprRecords([0], [1], [0.0], [1.0])
    with pytest.raises(DataError):
        TsprRecords([0], [-1], [0.0], [0.0])
    with pytest.raises(DataError):
        TsprRecords([0, 1], [1], [0.0], [0.0])


def test_naive_examples():
    n = 100
    sym = NaiveRecords(np.r_[10.0, np.zeros(n - 1)], np.r_[10.0, np.zeros(n - 1)])
    assert naive_theta(sym, 0.5) == 0.0
    rec = NaiveRecords(np.r_[6.0, np.zeros(n - 1)], np.r_[30.0, np.zeros(n - 1)])
    assert abs(estimate_naive_is(rec, 0.25).theta_hat - (-0.16)) <= 1e-12
    for p in (0.0, 1.0):
        with pytest.raises(EstimationError):
            naive_theta(rec, p)


def test_naive_from_items():
    rec = NaiveRecords.from_items([0, 0, 2], [True, False, True], [1.0, 1.0, 1.0], n_queries=4)
    assert rec.y_treated.tolist() == [1.0, 0.0, 1.0, 0.0]
    assert rec.y_control.tolist() == [1.0, 0.0, 0.0, 0.0]


stratum_records = st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), min_size=1, max_size=40)


def _random_records(data, arm):
    l = np.array([d[0] for d in data])
    y = np.minimum(np.array([d[1] for d in data], float), l)
    return records(arm, l, y, y + 0.5)


@settings(max_examples=200)
@given(stratum_records, stratum_records, st.floats(0.1, 1.0), st.floats(0.1, 10.0),
       st.randoms(use_true_random=False))
def test_estimator_properties(da, db, ybar0, c, rnd):
    a, b = _random_records(da, Arm.A), _random_records(db, Arm.B)
    try:
        rep = estimate_tspr(a, b, ybar0)
    except EstimationError:
        return
    assert math.fsum(s.weight for s in rep.strata) == pytest.approx(1.0, abs=1e-14)
    assert all(s.n_A >= 1 and s.n_B >= 1 and s.mean_YA > 0 for s in rep.strata)
    assert math.isfinite(rep.theta_hat)
    assert rep.theta_hat == pytest.approx(tspr_theta(a, b, ybar0), rel=1e-12, abs=1e-15)
    # order invariance
    ia, ib = list(range(len(a))), list(range(len(b)))
    rnd.shuffle(ia)
    rnd.shuffle(ib)
    shuffled = estimate_tspr(a.take(ia), b.take(ib), ybar0)
    assert shuffled.theta_hat == pytest.approx(rep.theta_hat, rel=1e-12, abs=1e-15)
    # scaling outcomes (and the baseline, which is an outcome mean) by c
    scaled = estimate_tspr(a.scaled(c), b.scaled(c), c * ybar0)
    assert scaled.theta_hat == pytest.approx(c * rep.theta_hat, rel=1e-9, abs=1e-12)
    # swapping arms negates each stratum's numerator
    try:
        swapped = {s.l: s for s in estimate_tspr(b, a, ybar0).strata}
    except EstimationError:
        swapped = {}
    for s in rep.strata:
        if s.l in swapped:
            t = swapped[s.l]
            assert t.mean_YB - t.mean_YA == pytest.approx(-(s.mean_YB - s.mean_YA))


@given(st.lists(st.tuples(st.floats(0, 3), st.floats(0, 3)), min_size=1, max_size=30),
       st.floats(0.05, 0.45), st.floats(0.1, 10))
def test_naive_scaling(rows, p, c):
    rec = NaiveRecords([r[0] for r in rows], [r[1] for r in rows])
    assert naive_theta(rec.scaled(c), p) == pytest.approx(c * naive_theta(rec, p), rel=1e-9, abs=1e-12)


def test_constant_data_zero_se():
    a = records(Arm.A, [1] * 10 + [2] * 10, [0.5] * 20)
    b = records(Arm.B, [1] * 10 + [2] * 10, [0.4] * 20)
    rep = tspr_with_se(TsprRecords.concat([a, b]), 0.7, 50, 0)
    assert rep.se == pytest.approx(0.0, abs=1e-15)
    nrec = NaiveRecords(np.ones(20), np.ones(20))
    assert naive_with_se(nrec, 0.25, 50, 0).se == pytest.approx(0.0, abs=1e-15)


def test_bootstrap_deterministic(experiment):
    _, rec, nrec = experiment
    assert tspr_with_se(rec, 0.7, 30, 7).se == tspr_with_se(rec, 0.7, 30, 7).se
    assert naive_with_se(nrec, 0.25, 30, 7).se == naive_with_se(nrec, 0.25, 30, 7).se


def test_bootstrap_stable_in_b(experiment):
    _, rec, nrec = experiment
    small, large = tspr_with_se(rec, 0.7, 200, 1).se, tspr_with_se(rec, 0.7, 2000, 2).se
    assert abs(small - large) / large <= 0.15
    small, large = naive_with_se(nrec, 0.25, 200, 1).se, naive_with_se(nrec, 0.25, 2000, 2).se
    assert abs(small - large) / large <= 0.15


def test_bootstrap_with_pre_sample(experiment):
    _, rec, _ = experiment
    pre = rec.take(np.arange(1000))
    fixed = tspr_with_se(rec, estimate_ybar0(pre), 100, 3)
    joint = tspr_with_se(rec, estimate_ybar0(pre), 100, 3, pre_records=pre)
    assert joint.theta_hat == fixed.theta_hat
    assert joint.se > 0 and fixed.se > 0


def test_bootstrap_failure():
    a = records(Arm.A, [1], [0.0])
    b = records(Arm.B, [1], [1.0])
    with pytest.raises(BootstrapError):
        bootstrap_se([a, b], lambda x, y: tspr_theta(x, y, 0.5), 10, 0)
    with pytest.raises(ValueError):
        bootstrap_se([a], lambda x: 0.0, 1, 0)


def test_tspr_records_csv_roundtrip(experiment, tmp_path):
    _, rec, _ = experiment
    rec.to_csv(tmp_path / "r.csv")
    back = TsprRecords.from_csv(tmp_path / "r.csv")
    for name in ("arm", "l", "y_total", "y_partial", "query_id"):
        assert np.array_equal(getattr(rec, name), getattr(back, name))


def test_item_outcomes_roundtrip(experiment, tmp_path):
    b, _, _ = experiment
    write_item_outcomes(b, tmp_path / "items.csv")
    back = read_item_outcomes(tmp_path / "items.csv")
    direct = NaiveRecords.from_batch(b)
    assert np.array_equal(back.y_treated, direct.y_treated)
    assert np.array_equal(back.y_control, direct.y_control)


def test_report_json_roundtrip(experiment):
    _, rec, _ = experiment
    rep = tspr_with_se(rec, 0.7, 20, 0)
    back = EstimateReport.from_dict(json.loads(rep.to_json()))
    assert back.theta_hat == rep.theta_hat and back.se == rep.se
    assert back.strata == rep.strata
    lo, hi = rep.ci95()
    assert rep.covers(rep.theta_hat) and lo < hi


def test_short_listings_excluded(experiment):
    b, rec, _ = experiment
    strict = TsprRecords.from_batch(b, min_listing=8)
    assert strict.n_excluded == int((b.n_displayed < 8).sum())
    assert len(strict) + strict.n_excluded == b.n_queries
    assert rec.n_excluded == int((b.n_displayed == 0).sum())
