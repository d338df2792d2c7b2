"""Experiment orchestration: ground truth, single experiments, Monte Carlo
replication, threshold sensitivity, partial-outcome curves and the
proportionality diagnostic.

Seeding: run ``i`` of a Monte Carlo study draws everything from
``SeedSequence([master_seed, i])``, so results do not depend on execution
order or on the number of worker processes.  Auxiliary studies (ground
truth, threshold tuning, curves, diagnostics) use keys above ``2**32`` that
no run index can reach.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from tspr.behavior import BookingParams, TreatmentSpec
from tspr.calibration import (
    DeltaFit,
    FitResult,
    HyperparamFit,
    ImpressionLog,
    ImpressionSchema,
    MomentTargets,
    calibrate_delta,
    calibrate_hyperparams,
    click_params_from_fit,
    conversion_drop,
    ctr_mae,
    fit_booking_model,
    fit_click_model,
    load_impressions,
    simulate_impressions,
    split_holdout,
)
from tspr.config import RunConfig
from tspr.errors import EstimationError
from tspr.estimators import (
    EstimateReport,
    NaiveRecords,
    TsprRecords,
    estimate_naive_is,
    estimate_tspr,
    estimate_ybar0,
    iter_strata_rows,
    naive_with_se,
    tspr_with_se,
)
from tspr.marketplace import Arm
from tspr.simulate import BehaviorModel, Market, simulate

_AUX = 2**32
GROUND_TRUTH, TUNING, CURVES, DIAGNOSE, CALIBRATE = (_AUX + k for k in range(1, 6))
METHODS = ("tspr", "naive")


def run_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(index)])


def aux_seed(master_seed: int, key: int, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(key), int(index)])


def draw_market(cfg: RunConfig, seed) -> Market:
    return Market.draw(cfg.n_items, np.random.default_rng(seed), cfg.utility, p=cfg.p)


# ---------------------------------------------------------------- ground truth


@dataclass
class GroundTruth:
    tate: float
    conversion_none: float
    conversion_all: float
    delta: float
    n_queries: int


def _ground_truth_setup(cfg: RunConfig, index: int = 0):
    seed = aux_seed(cfg.master_seed, GROUND_TRUTH, index)
    market_seed, sim_seed = seed.spawn(2)
    return draw_market(cfg, market_seed), sim_seed


@functools.lru_cache(maxsize=32)
def calibrate_config_delta(cfg: RunConfig) -> DeltaFit:
    """Delta giving a ``cfg.target_drop`` conversion drop on the ground-truth
    market and queries."""
    market, sim_seed = _ground_truth_setup(cfg)

    def drop(delta: float) -> float:
        return conversion_drop(market, delta, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model,
                               sim_seed, cfg.affects_clicks)

    return calibrate_delta(cfg.target_drop, drop, cfg.delta_tol, cfg.delta_bracket)


def resolve_delta(cfg: RunConfig) -> float:
    return cfg.delta if cfg.delta is not None else calibrate_config_delta(cfg).delta


def run_ground_truth(cfg: RunConfig, delta: float | None = None, index: int = 0) -> GroundTruth:
    """Everything treated vs nothing treated under the unmodified ranker.

    ``index`` selects an independent market and query sample; index 0 is
    the sample ``delta`` is calibrated on.
    """
    delta = resolve_delta(cfg) if delta is None else delta
    market, sim_seed = _ground_truth_setup(cfg, index)
    t = cfg.treatment(delta)
    none = simulate(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, t, sim_seed, policy="none")
    every = simulate(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, t, sim_seed, policy="all")
    c0, c1 = float(none.y_total.mean()), float(every.y_total.mean())
    return GroundTruth(c1 - c0, c0, c1, float(delta), cfg.n_queries)


# ---------------------------------------------------------------- one experiment


def run_pre_experiment(cfg: RunConfig, market: Market, seed, r_min: float) -> TsprRecords:
    """Modified ranker, nobody treated; the records' mean outcome is ``ybar0``."""
    b = simulate(market, cfg.n_pre, cfg.nq, cfg.sigma, cfg.model, cfg.treatment(0.0), seed,
                 ranker="tspr", r_min=r_min, arm_prob=cfg.arm_prob)
    rec = TsprRecords.from_batch(b, min_listing=0)
    rec.arm = np.full(len(rec), Arm.PRE_EXPERIMENT, dtype=np.int64)
    return rec


def run_tspr_experiment(cfg: RunConfig, market: Market, seed, r_min: float,
                        delta: float) -> TsprRecords:
    b = simulate(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, cfg.treatment(delta),
                 seed, ranker="tspr", policy="assigned", r_min=r_min, arm_prob=cfg.arm_prob)
    return TsprRecords.from_batch(b, cfg.min_listing)


def run_naive_experiment(cfg: RunConfig, market: Market, seed, delta: float) -> NaiveRecords:
    """Item-side experiment: Treated items get the treatment, ranking untouched."""
    b = simulate(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, cfg.treatment(delta),
                 seed, policy="assigned")
    return NaiveRecords.from_batch(b)


@dataclass
class MethodResult:
    run: int
    method: str
    theta_hat: float
    se: float
    covered_95: bool | None
    error: str | None = None
    ybar0: float = math.nan


@dataclass
class RunOutput:
    results: list[MethodResult]
    strata: list[dict]


def run_single(cfg: RunConfig, index: int, r_min: float, delta: float,
               truth: float | None, methods: Sequence[str] = METHODS) -> RunOutput:
    """One replication: fresh partition, pre-experiment, TSPR and naive runs."""
    s_market, s_pre, s_exp, s_naive, s_boot = run_seed(cfg.master_seed, index).spawn(5)
    market = draw_market(cfg, s_market)
    boot_tspr, boot_naive = s_boot.spawn(2)
    results, strata = [], []

    def finish(method, report: EstimateReport):
        covered = None
        if truth is not None and math.isfinite(report.se):
            covered = bool(report.covers(truth))
        results.append(MethodResult(index, method, report.theta_hat, report.se, covered,
                                    ybar0=report.ybar0))

    if "tspr" in methods:
        try:
            pre = run_pre_experiment(cfg, market, s_pre, r_min)
            ybar0 = estimate_ybar0(pre)
            rec = run_tspr_experiment(cfg, market, s_exp, r_min, delta)
            if cfg.n_boot:
                report = tspr_with_se(rec, ybar0, cfg.n_boot, np.random.default_rng(boot_tspr),
                                      cfg.min_stratum, pre if cfg.resample_pre else None)
            else:
                report = estimate_tspr(rec.arm_subset(Arm.A), rec.arm_subset(Arm.B), ybar0,
                                       cfg.min_stratum)
            report.diagnostics["n_short_listings"] = rec.n_excluded
            finish("tspr", report)
            strata.extend(iter_strata_rows(report, run=index, method="tspr"))
        except EstimationError as exc:
            results.append(MethodResult(index, "tspr", math.nan, math.nan, None, str(exc)))
    if "naive" in methods:
        nrec = run_naive_experiment(cfg, market, s_naive, delta)
        if cfg.n_boot:
            report = naive_with_se(nrec, cfg.p, cfg.n_boot, np.random.default_rng(boot_naive))
        else:
            report = estimate_naive_is(nrec, cfg.p)
        finish("naive", report)
    return RunOutput(results, strata)


# ---------------------------------------------------------------- Monte Carlo


@dataclass
class MonteCarloSummary:
    results: list[MethodResult]
    strata: list[dict]
    truth: float | None
    delta: float
    r_min: float

    def estimates(self, method: str) -> np.ndarray:
        return np.array([r.theta_hat for r in self.results if r.method == method])

    def ses(self, method: str) -> np.ndarray:
        return np.array([r.se for r in self.results if r.method == method])

    def stats(self, method: str) -> dict:
        est = self.estimates(method)
        ok = est[np.isfinite(est)]
        se = self.ses(method)
        cov = [r.covered_95 for r in self.results if r.method == method and r.covered_95 is not None]
        n = len(ok)
        mean = float(ok.mean()) if n else math.nan
        sd = float(ok.std(ddof=1)) if n > 1 else math.nan
        return {
            "method": method,
            "n_runs": len(est),
            "n_failed": int(len(est) - n),
            "mean": mean,
            "std": sd,
            "mc_se": sd / math.sqrt(n) if n > 1 else math.nan,
            "bias": mean - self.truth if self.truth is not None else math.nan,
            "mean_se": float(np.nanmean(se)) if np.isfinite(se).any() else math.nan,
            "pooled_se": float(np.sqrt(np.nanmean(se**2))) if np.isfinite(se).any() else math.nan,
            "coverage": float(np.mean(cov)) if cov else math.nan,
        }

    @property
    def methods(self) -> list[str]:
        return sorted({r.method for r in self.results}, key=lambda m: (m not in METHODS, m))

    def histogram(self, bins: int = 30) -> list[dict]:
        pooled = np.concatenate([self.estimates(m) for m in self.methods])
        pooled = pooled[np.isfinite(pooled)]
        if not len(pooled):
            return []
        edges = np.histogram_bin_edges(pooled, bins=bins)
        rows = []
        for m in self.methods:
            est = self.estimates(m)
            counts, _ = np.histogram(est[np.isfinite(est)], bins=edges)
            rows.extend({"method": m, "bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)}
                        for lo, hi, c in zip(edges[:-1], edges[1:], counts))
        return rows

    def to_dict(self) -> dict:
        return {
            "truth": self.truth,
            "delta": self.delta,
            "r_min": self.r_min,
            "methods": {m: self.stats(m) for m in self.methods},
        }


def _mc_task(args) -> RunOutput:
    return run_single(*args)


def run_monte_carlo(
    cfg: RunConfig,
    runs: int | None = None,
    r_min: float | None = None,
    delta: float | None = None,
    truth: float | None = None,
    methods: Sequence[str] = METHODS,
    workers: int | None = None,
) -> MonteCarloSummary:
    """Independent replications of the experiment.

    ``truth`` defaults to the ground-truth TATE (exactly 0 when ``delta`` is
    0); CI coverage is measured against it.
    """
    runs = cfg.runs if runs is None else runs
    r_min = resolve_r_min(cfg) if r_min is None else r_min
    delta = resolve_delta(cfg) if delta is None else delta
    if truth is None:
        truth = 0.0 if delta == 0 else run_ground_truth(cfg, delta).tate
    workers = cfg.workers if workers is None else workers
    tasks = [(cfg, i, r_min, delta, truth, tuple(methods)) for i in range(runs)]
    if workers > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_mc_task, tasks))
    else:
        outs = [_mc_task(t) for t in tasks]
    results = [r for o in outs for r in o.results]
    strata = [s for o in outs for s in o.strata]
    return MonteCarloSummary(results, strata, truth, float(delta), float(r_min))


# ---------------------------------------------------------------- threshold


@dataclass
class TuneResult:
    r_min: float
    table: list[dict]
    tol: float


@functools.lru_cache(maxsize=32)
def tune_r_min(cfg: RunConfig, grid: tuple[float, ...] | None = None,
               tol: float | None = None) -> TuneResult:
    """Pick the relevance threshold from pre-experiment simulations.

    For each grid value the modified ranker (nobody treated) is compared
    with the unmodified ranker on the same queries.  The gap is the largest
    absolute difference between their mean partial-outcome curves.  The
    smallest threshold whose gap is within ``tol`` wins, which keeps
    listings as long as possible; if none qualifies the smallest gap wins.
    """
    grid = tuple(sorted(cfg.r_grid if grid is None else grid))
    tol = cfg.tune_tol if tol is None else tol
    market_seed, sim_seed = aux_seed(cfg.master_seed, TUNING).spawn(2)
    market = draw_market(cfg, market_seed)
    t0 = cfg.treatment(0.0)
    base = simulate(market, cfg.tune_queries, cfg.nq, cfg.sigma, cfg.model, t0, sim_seed)
    l_max = cfg.nq.max
    base_curve = base.partial_curve(l_max)
    table = []
    for r in grid:
        mod = simulate(market, cfg.tune_queries, cfg.nq, cfg.sigma, cfg.model, t0, sim_seed,
                       ranker="tspr", r_min=r, arm_prob=cfg.arm_prob)
        gap = np.abs(mod.partial_curve(l_max) - base_curve)
        table.append({
            "r_min": float(r),
            "gap_max": float(gap.max()),
            "gap_mean": float(gap[1:].mean()),
            "ybar0": float(mod.y_total.mean()),
            "baseline": float(base.y_total.mean()),
            "mean_displayed": float(mod.n_displayed.mean()),
        })
    within = [row for row in table if row["gap_max"] <= tol]
    pick = within[0] if within else min(table, key=lambda row: row["gap_max"])
    return TuneResult(pick["r_min"], table, tol)


def resolve_r_min(cfg: RunConfig) -> float:
    return cfg.r_min if cfg.r_min is not None else tune_r_min(cfg).r_min


# ---------------------------------------------------------------- sensitivity


@dataclass
class SensitivityCell:
    r_min: float
    mean_theta: float
    std_theta: float
    mean_se: float
    pooled_se: float
    ci_lo: float
    ci_hi: float
    n_runs: int
    n_failed: int
    flagged: bool


@dataclass
class SensitivityResult:
    cells: list[SensitivityCell]
    truth: float

    @property
    def spread(self) -> float:
        means = [c.mean_theta for c in self.cells if math.isfinite(c.mean_theta)]
        return max(means) - min(means)

    @property
    def pooled_se(self) -> float:
        return float(np.sqrt(np.nanmean([c.pooled_se**2 for c in self.cells])))

    @property
    def se_trend(self) -> float:
        """Spearman rank correlation between threshold and mean SE."""
        r = [c.r_min for c in self.cells]
        se = [c.mean_se for c in self.cells]
        return float(spearmanr(r, se).statistic)

    def rows(self) -> list[dict]:
        return [asdict(c) for c in self.cells]


def run_sensitivity(cfg: RunConfig, grid: Sequence[float], runs: int | None = None,
                    delta: float | None = None, workers: int | None = None) -> SensitivityResult:
    """Monte Carlo TSPR estimates at each threshold.

    All cells reuse the same run seeds, so they share markets and users and
    differ only in the threshold.  Cells where some runs had no usable
    stratum are flagged.
    """
    if len(grid) == 0:
        raise ValueError("threshold grid is empty")
    delta = resolve_delta(cfg) if delta is None else delta
    truth = 0.0 if delta == 0 else run_ground_truth(cfg, delta).tate
    cells = []
    for r in sorted(grid):
        mc = run_monte_carlo(cfg, runs, r_min=r, delta=delta, truth=truth, methods=("tspr",),
                             workers=workers)
        st = mc.stats("tspr")
        cells.append(SensitivityCell(
            float(r), st["mean"], st["std"], st["mean_se"], st["pooled_se"],
            st["mean"] - 1.96 * st["mean_se"], st["mean"] + 1.96 * st["mean_se"],
            st["n_runs"], st["n_failed"], st["n_failed"] > 0,
        ))
    return SensitivityResult(cells, truth)


# ---------------------------------------------------------------- curves


def _mean_curve(y: np.ndarray, l_max: int) -> np.ndarray:
    curve = np.concatenate([[0.0], np.cumsum(y, axis=1).mean(axis=0)]) if len(y) else np.zeros(1)
    if len(curve) < l_max + 1:
        curve = np.concatenate([curve, np.full(l_max + 1 - len(curve), curve[-1])])
    return curve[: l_max + 1]


SCENARIOS = ("no_treatment", "full_treatment", "arm_A", "arm_B")


def run_partial_outcome_curves(cfg: RunConfig, n_sims: int | None = None,
                               delta: float | None = None,
                               r_min: float | None = None) -> list[dict]:
    """Mean ``Y^l`` by rank for four scenarios.

    ``no_treatment`` and ``full_treatment`` use the unmodified ranker; the
    two arms come from a prioritized-ranking experiment at share ``p``.
    Curves are averaged over ``n_sims`` simulations (fresh market each).
    """
    n_sims = cfg.curve_runs if n_sims is None else n_sims
    delta = resolve_delta(cfg) if delta is None else delta
    r_min = resolve_r_min(cfg) if r_min is None else r_min
    l_max = cfg.nq.max
    t = cfg.treatment(delta)
    acc = {s: np.zeros(l_max + 1) for s in SCENARIOS}
    for i in range(n_sims):
        s_market, s_base, s_exp = aux_seed(cfg.master_seed, CURVES, i).spawn(3)
        market = draw_market(cfg, s_market)
        none = simulate(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, t, s_base, policy="none")
        full = simulate(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, t, s_base, policy="all")
        exp = simulate(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, t, s_exp,
                       ranker="tspr", policy="assigned", r_min=r_min, arm_prob=cfg.arm_prob)
        acc["no_treatment"] += _mean_curve(none.y, l_max)
        acc["full_treatment"] += _mean_curve(full.y, l_max)
        acc["arm_A"] += _mean_curve(exp.y[exp.arm == Arm.A], l_max)
        acc["arm_B"] += _mean_curve(exp.y[exp.arm == Arm.B], l_max)
    return [
        {"l": l, "scenario": s, "mean_Y_l": float(acc[s][l] / n_sims)}
        for s in SCENARIOS for l in range(l_max + 1)
    ]


# ---------------------------------------------------------------- diagnostics


def diagnose_proportionality(cfg: RunConfig, l_values: Sequence[int] | None = None,
                             delta: float | None = None, n_queries: int | None = None,
                             ranker: str | None = None) -> list[dict]:
    """Measured partial effects against their proportional prediction.

    For each ``l`` the first ``l`` listed items are treated and compared
    with treating nothing on the same queries (common random numbers).  The
    prediction scales the whole-listing effect by ``E[Y^l] / E[Y]`` under no
    treatment.  ``se_measured`` is the standard error of the paired
    per-query difference and ``se_deviation`` that of measured minus
    predicted (the share ``E[Y^l] / E[Y]`` held fixed).
    """
    l_values = cfg.diagnose_l if l_values is None else l_values
    delta = resolve_delta(cfg) if delta is None else delta
    n_queries = cfg.n_queries if n_queries is None else n_queries
    ranker = cfg.diagnose_ranker if ranker is None else ranker
    s_market, s_sim = aux_seed(cfg.master_seed, DIAGNOSE).spawn(2)
    market = draw_market(cfg, s_market)
    t = cfg.treatment(delta)

    def outcomes(policy):
        return simulate(market, n_queries, cfg.nq, cfg.sigma, cfg.model, t, s_sim,
                        ranker=ranker, policy=policy)

    none = outcomes("none")
    y0 = none.y_total
    d_all = outcomes("all").y_total - y0
    theta = float(d_all.mean())
    ey = float(y0.mean())
    rows = []
    for l in l_values:
        diff = outcomes(int(l)).y_total - y0
        ey_l = float(_mean_curve(none.y, l)[l])
        share = ey_l / ey if ey > 0 else math.nan
        predicted = share * theta
        measured = float(diff.mean())
        gap = diff - share * d_all
        rows.append({
            "l": int(l),
            "theta_l_measured": measured,
            "theta_l_predicted": predicted,
            "rel_deviation": (measured - predicted) / abs(predicted) if predicted else math.nan,
            "se_measured": float(diff.std(ddof=1) / math.sqrt(len(diff))),
            "se_deviation": float(gap.std(ddof=1) / math.sqrt(len(gap))),
            "mean_Y_l_control": ey_l,
            "mean_Y_control": ey,
            "theta": theta,
        })
    return rows


# ---------------------------------------------------------------- output


def write_csv(path, rows: Iterable[dict], columns: Sequence[str] | None = None) -> int:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return len(rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return "" if v is None else v


def write_json(path, payload: dict) -> None:
    """JSON with numpy values unwrapped and non-finite floats as ``null``."""
    Path(path).write_text(json.dumps(_plain(payload), indent=2, sort_keys=True, allow_nan=False))


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple, np.ndarray)):
        return [_plain(v) for v in o]
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


RUNS_COLUMNS = ("run", "method", "theta_hat", "se", "covered_95")


def write_monte_carlo(out_dir, summary: MonteCarloSummary) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "runs.csv", (asdict(r) for r in summary.results), RUNS_COLUMNS)
    write_csv(out / "strata.csv", summary.strata,
              ("run", "method", "l", "n_A", "n_B", "mean_YA", "mean_YB", "weight",
               "raw_weight", "term"))
    write_csv(out / "hist.csv", summary.histogram(), ("method", "bin_lo", "bin_hi", "count"))
    return ["runs.csv", "strata.csv", "hist.csv"]


# ---------------------------------------------------------------- calibration


@dataclass
class CalibrationOutcome:
    click_fit: FitResult
    booking_fit: FitResult
    hyper: HyperparamFit
    delta: DeltaFit | None
    holdout_ctr: np.ndarray
    simulated_ctr: np.ndarray
    holdout_mae: float
    n_rows: int
    n_skipped: int
    n_violations: int

    def params(self) -> dict:
        c = click_params_from_fit(self.click_fit)
        return {
            "b0": c.b0, "b_rank": c.b_rank, "b_rank2": c.b_rank2, "b_v": c.b_v,
            "b_prior": c.b_prior, "g_v": float(self.booking_fit.coefficients[0]),
            "outside_utility": 0.0, "sigma": self.hyper.sigma,
            "nq_values": list(self.hyper.nq.values),
        }


def run_calibration(
    cfg: RunConfig,
    impressions=None,
    sigma_grid: Sequence[float] = (4.0, 8.0, 12.0),
    nq_grid: Sequence[int] = (10, 25, 40),
    n_ranks: int = 10,
    schema: ImpressionSchema = ImpressionSchema(),
    target_drop: float | None = None,
) -> CalibrationOutcome:
    """Fit behaviour, match hyperparameters and calibrate the treatment.

    ``impressions`` is a CSV path, an :class:`ImpressionLog`, or ``None``
    to generate a log from the simulator at ``cfg`` (useful to check that
    the loop recovers known settings).  Impressions are split into train
    and hold-out sets by impression id; the hold-out relevance-sorted pages
    give the CTR curve the calibrated simulator is compared against.
    """
    s_market, s_log, s_split, s_grid, s_check = aux_seed(cfg.master_seed, CALIBRATE).spawn(5)
    market = draw_market(cfg, s_market)
    if impressions is None:
        log = simulate_impressions(market, cfg.n_queries, cfg.nq, cfg.sigma, cfg.model, s_log,
                                   cfg.random_share)
    elif isinstance(impressions, ImpressionLog):
        log = impressions
    else:
        log = load_impressions(impressions, schema)
    train, holdout = split_holdout(log, cfg.holdout_share, s_split)
    click_fit = fit_click_model(train)
    booking_fit = fit_booking_model(train.subset(train.random_sort == 0)
                                    if (train.random_sort == 0).any() else train)
    model = BehaviorModel(click_params_from_fit(click_fit),
                          BookingParams(float(booking_fit.coefficients[0]), 0.0),
                          cfg.outcome_kind, cfg.scan)
    targets = MomentTargets.from_log(train, n_ranks)
    grid = [(s, n) for s in sigma_grid for n in nq_grid]
    hyper = calibrate_hyperparams(targets, grid, market, model, cfg.n_queries, s_grid)
    check = simulate(market, cfg.n_queries, hyper.nq, hyper.sigma, model, TreatmentSpec(), s_check)
    sim_ctr = check.ctr_by_rank(n_ranks)
    hold_ctr = MomentTargets.from_log(holdout, n_ranks).ctr_by_rank
    target_drop = cfg.target_drop if target_drop is None else target_drop
    delta_fit = None
    if target_drop > 0:
        fitted = cfg.with_(b0=model.click.b0, b_rank=model.click.b_rank,
                           b_rank2=model.click.b_rank2, b_v=model.click.b_v,
                           b_prior=model.click.b_prior, g_v=model.booking.g_v,
                           outside_utility=0.0, sigma=hyper.sigma,
                           nq_values=hyper.nq.values, nq_probs=hyper.nq.probs,
                           target_drop=target_drop, delta=None)
        delta_fit = calibrate_config_delta(fitted)
    return CalibrationOutcome(click_fit, booking_fit, hyper, delta_fit, hold_ctr, sim_ctr,
                              ctr_mae(sim_ctr, hold_ctr), len(log), log.n_skipped,
                              log.n_violations)
