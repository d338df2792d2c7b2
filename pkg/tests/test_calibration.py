import math

import numpy as np
import pytest
from scipy.special import expit, logit

from tspr.behavior import BookingParams, ClickParams
from tspr.calibration import (
    ChoiceSets,
    GridCell,
    ImpressionLog,
    ImpressionSchema,
    MomentTargets,
    calibrate_delta,
    calibrate_hyperparams,
    choice_grad,
    choice_hessian,
    choice_loglik,
    click_design,
    conversion_drop,
    fit_booking_model,
    fit_click_model,
    fit_logistic,
    load_impressions,
    logistic_grad,
    logistic_hessian,
    logistic_loglik,
    moment_loss,
    simulate_impressions,
    split_holdout,
    write_impressions,
)
from tspr.errors import BracketingError, ConfigError, DataError, FitError, SchemaError
from tspr.marketplace import NqSpec, UtilityDist
from tspr.simulate import BehaviorModel, Market

HEADER = "srch_id,position,prop_id,click_bool,booking_bool,random_bool\n"


@pytest.fixture(scope="module")
def market():
    return Market.draw(50_000, np.random.default_rng(7), UtilityDist("normal", 1.0, 1.0), p=0.25)


@pytest.fixture(scope="module")
def click_log(market):
    model = BehaviorModel(ClickParams(-1.0, -0.1, 0.0, 0.8, 0.3))
    return simulate_impressions(market, 20_000, NqSpec.fixed(10), 4.0, model, 31, random_share=1.0)


def write(tmp_path, body, header=HEADER):
    path = tmp_path / "log.csv"
    path.write_text(header + body)
    return path


def test_load_three_rows(tmp_path):
    log = load_impressions(write(tmp_path, "1,1,10,1,1,0\n1,2,11,0,0,0\n2,1,12,1,0,1\n"))
    assert len(log) == 3 and log.n_skipped == 0 and log.n_violations == 0
    assert log.n_impressions == 2


def test_booked_without_click_rejected(tmp_path):
    log = load_impressions(write(tmp_path, "1,1,10,0,1,0\n1,2,11,1,0,0\n"))
    assert len(log) == 1 and log.n_violations == 1


def test_double_booking_rejected(tmp_path):
    log = load_impressions(write(tmp_path, "1,1,10,1,1,0\n1,2,11,1,1,0\n2,1,5,1,0,0\n"))
    assert log.impression_id.tolist() == [2] and log.n_violations == 2


def test_malformed_rows_skipped(tmp_path):
    log = load_impressions(write(tmp_path, "1,1,10,1,0,0\n1,x,11,0,0,0\n1,3,12,2,0,0\n"))
    assert len(log) == 1 and log.n_skipped == 2 and len(log.problems) == 2


def test_missing_column(tmp_path):
    with pytest.raises(SchemaError):
        load_impressions(write(tmp_path, "1,1,10,1,0\n", "srch_id,position,prop_id,click_bool,booking_bool\n"))


def test_empty_and_missing_file(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(DataError):
        load_impressions(empty)
    with pytest.raises(DataError):
        load_impressions(write(tmp_path, ""))
    with pytest.raises(DataError):
        load_impressions(tmp_path / "nope.csv")


def test_custom_schema(tmp_path):
    schema = ImpressionSchema(impression_id="q", item_id="hotel", clicked="c", booked="b",
                              random_sort="r")
    path = write(tmp_path, "3,1,9,1,0,1\n", "q,position,hotel,c,b,r\n")
    assert load_impressions(path, schema).item_id.tolist() == [9]


def test_simulated_log_roundtrip(market, tmp_path):
    log = simulate_impressions(market, 300, NqSpec((4, 9), (0.5, 0.5)), 4.0, BehaviorModel(), 3)
    write_impressions(log, tmp_path / "sim.csv")
    back = load_impressions(tmp_path / "sim.csv")
    assert back.rows() == log.rows()
    assert back.n_skipped == 0 and back.n_violations == 0


def test_log_sorted_and_prior_clicks():
    log = ImpressionLog(np.array([2, 1, 1, 1]), np.array([1, 3, 1, 2]), np.arange(4),
                        np.array([1, 1, 1, 0]), np.zeros(4, int), np.zeros(4, int), np.zeros(4))
    assert log.impression_id.tolist() == [1, 1, 1, 2]
    assert log.position.tolist() == [1, 2, 3, 1]
    assert log.prior_clicks().tolist() == [0, 1, 1, 0]


def test_split_holdout_by_impression(click_log):
    train, hold = split_holdout(click_log, 0.2, 0)
    assert len(train) + len(hold) == len(click_log)
    assert not set(train.impression_id) & set(hold.impression_id)
    assert abs(hold.n_impressions / click_log.n_impressions - 0.2) < 0.02
    with pytest.raises(ConfigError):
        split_holdout(click_log, 1.0)


def test_intercept_only_mle():
    y = np.r_[np.ones(250), np.zeros(750)]
    log = ImpressionLog(np.arange(1000), np.ones(1000, int), np.arange(1000), y.astype(int),
                        np.zeros(1000, int), np.ones(1000, int), np.zeros(1000))
    res = fit_click_model(log, features=("intercept",))
    assert res.converged
    assert abs(res.coefficients[0] - logit(0.25)) <= 1e-6
    assert abs(res.coefficients[0] - (-1.0986)) <= 1e-4


def test_click_recovery(click_log):
    assert len(click_log) == 200_000
    res = fit_click_model(click_log)
    assert res.converged and res.gradient_norm <= 1e-8
    assert np.all(np.abs(res.coefficients - [-1.0, -0.1, 0.0, 0.8, 0.3]) <= 0.05)
    hist = np.array(res.history)
    assert np.all(np.diff(hist) >= -1e-9 * np.abs(hist[1:]))


def test_click_recovery_improves_with_sample(click_log):
    small = click_log.subset(click_log.impression_id < 2_000)
    true = np.array([-1.0, -0.1, 0.0, 0.8, 0.3])
    err_small = np.abs(fit_click_model(small).coefficients - true).max()
    err_large = np.abs(fit_click_model(click_log).coefficients - true).max()
    assert err_large < err_small


def test_logistic_gradient_finite_differences(click_log):
    sub = click_log.subset(click_log.impression_id < 300)
    X, y = click_design(sub), sub.clicked.astype(float)
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(20):
        beta = rng.normal(0, 0.3, X.shape[1])
        g = logistic_grad(beta, X, y)
        fd = np.array([(logistic_loglik(beta + h * e, X, y) - logistic_loglik(beta - h * e, X, y)) / (2 * h)
                       for e in np.eye(len(beta))])
        assert np.all(np.abs(fd - g) <= 1e-6 * np.maximum(np.abs(g), 1.0))
        H = logistic_hessian(beta, X)
        fdH = np.column_stack([(logistic_grad(beta + h * e, X, y) - logistic_grad(beta - h * e, X, y)) / (2 * h)
                               for e in np.eye(len(beta))])
        assert np.allclose(fdH, H, rtol=1e-5, atol=1e-4)


def choice_data(g_v, n_sets, seed):
    """Clicked sets of 1..4 items with x ~ N(1, 1); logit choice vs outside 0."""
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 5, n_sets)
    set_id = np.repeat(np.arange(n_sets), sizes)
    x = rng.normal(1.0, 1.0, len(set_id))
    chosen = np.zeros(len(set_id), bool)
    start = 0
    for k in sizes:
        w = np.exp(np.r_[0.0, g_v * x[start:start + k]])
        pick = rng.choice(k + 1, p=w / w.sum())
        if pick:
            chosen[start + pick - 1] = True
        start += k
    return ChoiceSets(set_id, x, chosen)


@pytest.mark.parametrize("g_v", [1.0, 0.0])
def test_booking_recovery(g_v):
    cs = choice_data(g_v, 100_000, 5)
    res = fit_booking_model(cs)
    assert res.converged and res.gradient_norm <= 1e-6
    assert abs(res.coefficients[0] - g_v) <= 0.05


def test_choice_gradient_finite_differences():
    cs = choice_data(0.7, 2_000, 1)
    h = 1e-5
    for g in np.random.default_rng(2).uniform(-2, 2, 20):
        fd = (choice_loglik(g + h, cs) - choice_loglik(g - h, cs)) / (2 * h)
        an = choice_grad(g, cs)[0]
        assert abs(fd - an) <= 1e-6 * max(abs(an), 1.0)
        fdh = (choice_grad(g + h, cs)[0] - choice_grad(g - h, cs)[0]) / (2 * h)
        assert fdh == pytest.approx(choice_hessian(g, cs)[0, 0], rel=1e-5)


def test_booking_fit_from_log(market):
    model = BehaviorModel(ClickParams(), BookingParams(1.0, 0.0))
    log = simulate_impressions(market, 40_000, NqSpec.fixed(10), 4.0, model, 9)
    res = fit_booking_model(log)
    assert abs(res.coefficients[0] - 1.0) <= 0.05


def test_booking_degenerate_inputs():
    res = fit_booking_model(ChoiceSets([0, 1, 1], [0.5, -1.0, 2.0], [False, False, False]),
                            max_iter=20)
    assert any("degenerate" in f for f in res.flags)
    with pytest.raises(FitError):
        fit_booking_model(ChoiceSets([0, 1], [1.0, 1.0], [True, False]))


def test_singular_design():
    X = np.column_stack([np.ones(100), np.ones(100)])
    with pytest.raises(FitError):
        fit_logistic(X, np.r_[np.ones(30), np.zeros(70)])


def test_separation_flagged():
    x = np.linspace(-1, 1, 200)
    X = np.column_stack([np.ones(200), x])
    res = fit_logistic(X, (x > 0).astype(float), max_iter=30)
    assert not res.converged
    assert any("separation" in f for f in res.flags)


def test_moment_loss():
    t = MomentTargets(np.array([0.5, 0.3, np.nan]), 0.7, 1.2)
    assert moment_loss(t, t) == 0.0
    s = MomentTargets(np.array([0.4, 0.3, 0.1]), 0.7 * 1.1, 1.2)
    assert moment_loss(s, t) == pytest.approx(0.01 / 2 + 1.0 + 0.01)


@pytest.fixture(scope="module")
def targets(market):
    from tspr.simulate import simulate
    from tspr.behavior import TreatmentSpec

    b = simulate(market, 3_000, NqSpec.fixed(15), 4.0, BehaviorModel(), TreatmentSpec(), 77)
    return MomentTargets.from_batch(b)


def test_grid_recovers_generating_cell(market, targets):
    fit = calibrate_hyperparams(targets, [(s, n) for s in (2.0, 4.0, 8.0) for n in (8, 15, 25)],
                                market, BehaviorModel(), 3_000, 77)
    assert (fit.sigma, fit.nq.values) == (4.0, (15,))
    assert fit.loss == 0.0
    assert len(fit.surface) == 9


def test_grid_single_cell_and_order(market, targets):
    one = calibrate_hyperparams(targets, [GridCell(8.0, NqSpec.fixed(8))], market,
                                BehaviorModel(), 2_000, 1)
    assert (one.sigma, one.nq.values) == (8.0, (8,)) and one.loss > 0
    grid = [(s, n) for s in (2.0, 8.0) for n in (8, 15)]
    a = calibrate_hyperparams(targets, grid, market, BehaviorModel(), 2_000, 1)
    b = calibrate_hyperparams(targets, grid[::-1], market, BehaviorModel(), 2_000, 1)
    assert a.surface == b.surface and (a.sigma, a.nq) == (b.sigma, b.nq)
    with pytest.raises(ConfigError):
        calibrate_hyperparams(targets, [], market, BehaviorModel())


def drop_fn(market):
    return lambda d: conversion_drop(market, d, 5_000, NqSpec.fixed(15), 4.0, BehaviorModel(), 3)


def test_delta_zero_target():
    fit = calibrate_delta(0.0, lambda d: 1 / 0)
    assert fit.delta == 0.0


def test_delta_bisection(market):
    f = drop_fn(market)
    fit = calibrate_delta(0.05, f, tol=1e-4)
    assert abs(f(fit.delta) - 0.05) <= 1e-4
    path = sorted(fit.path)
    assert all(b[1] >= a[1] for a, b in zip(path, path[1:]))
    again = calibrate_delta(0.05, f, tol=1e-4)
    assert again.delta == fit.delta


def test_delta_bracketing_error(market):
    with pytest.raises(BracketingError):
        calibrate_delta(0.05, drop_fn(market), bracket=(0.0, 0.01))


def test_zero_delta_no_drop(market):
    assert drop_fn(market)(0.0) == 0.0


def test_sigmoid_identity_used_by_fits():
    # the fits rely on expit and log-expit agreeing with the textbook forms
    z = np.linspace(-30, 30, 61)
    assert np.allclose(expit(z), 1 / (1 + np.exp(-z)))
    assert math.isclose(logit(0.25), math.log(0.25 / 0.75))
