"""Fitting the behaviour model to impression logs and matching moments.

Impression logs are search result pages: one row per displayed item with
its position, a click flag, a booking flag and whether the page was sorted
at random.  Click coefficients come from a logistic regression on the
randomly sorted pages, the booking coefficient from a conditional logit over
clicked items plus an outside option, and the relevance noise ``sigma`` and
candidate count ``n_q`` from a grid search that matches simulated click and
booking rates to the log.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from tspr.behavior import BookingParams, ClickParams, TreatmentSpec
from tspr.errors import BracketingError, ConfigError, DataError, FitError, SchemaError
from tspr.marketplace import NqSpec
from tspr.simulate import Batch, BehaviorModel, Market, as_seed_sequence, simulate

CLICK_FEATURES = ("intercept", "position", "position_sq", "utility", "prior_clicks")


@dataclass(frozen=True)
class ImpressionRow:
    impression_id: int
    position: int
    item_id: int
    clicked: int
    booked: int
    random_sort: int
    utility_proxy: float = float("nan")


@dataclass(frozen=True)
class ImpressionSchema:
    """Column names of an impression CSV."""

    impression_id: str = "srch_id"
    position: str = "position"
    item_id: str = "prop_id"
    clicked: str = "click_bool"
    booked: str = "booking_bool"
    random_sort: str = "random_bool"
    utility_proxy: str = "utility_proxy"

    @property
    def required(self) -> tuple[str, ...]:
        return (self.impression_id, self.position, self.item_id, self.clicked,
                self.booked, self.random_sort)


@dataclass
class ImpressionLog:
    """Column arrays of an impression log, sorted by impression then position."""

    impression_id: np.ndarray
    position: np.ndarray
    item_id: np.ndarray
    clicked: np.ndarray
    booked: np.ndarray
    random_sort: np.ndarray
    utility_proxy: np.ndarray
    n_skipped: int = 0
    n_violations: int = 0
    problems: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        order = np.lexsort((self.position, self.impression_id))
        for name in ("impression_id", "position", "item_id", "clicked", "booked",
                     "random_sort", "utility_proxy"):
            arr = np.asarray(getattr(self, name))
            setattr(self, name, arr[order])

    def __len__(self) -> int:
        return len(self.impression_id)

    @classmethod
    def from_rows(cls, rows: Sequence[ImpressionRow], **report) -> ImpressionLog:
        cols = list(zip(*[(r.impression_id, r.position, r.item_id, r.clicked, r.booked,
                           r.random_sort, r.utility_proxy) for r in rows])) or [()] * 7
        ints = [np.asarray(c, dtype=np.int64) for c in cols[:6]]
        return cls(*ints, np.asarray(cols[6], dtype=float), **report)

    def rows(self) -> list[ImpressionRow]:
        return [
            ImpressionRow(int(i), int(p), int(it), int(c), int(b), int(r), float(u))
            for i, p, it, c, b, r, u in zip(
                self.impression_id, self.position, self.item_id, self.clicked,
                self.booked, self.random_sort, self.utility_proxy,
            )
        ]

    def subset(self, mask) -> ImpressionLog:
        mask = np.asarray(mask, dtype=bool)
        return ImpressionLog(
            self.impression_id[mask], self.position[mask], self.item_id[mask],
            self.clicked[mask], self.booked[mask], self.random_sort[mask],
            self.utility_proxy[mask],
        )

    @property
    def n_impressions(self) -> int:
        return len(np.unique(self.impression_id))

    def prior_clicks(self) -> np.ndarray:
        """Clicks at earlier positions of the same impression."""
        c = self.clicked.astype(np.int64)
        csum = np.cumsum(c)
        starts = np.flatnonzero(np.r_[True, np.diff(self.impression_id) != 0])
        base = np.repeat(csum[starts] - c[starts], np.diff(np.r_[starts, len(c)]))
        return csum - c - base


def load_impressions(path, schema: ImpressionSchema = ImpressionSchema()) -> ImpressionLog:
    """Parse an impression CSV.

    Rows with unparsable fields are skipped and counted.  Rows booked but
    not clicked, and impressions with more than one booking, are rejected
    and counted as violations.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path} does not exist")
    rows: list[ImpressionRow] = []
    skipped = 0
    problems: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path} is empty")
        missing = [c for c in schema.required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path} lacks columns {missing}")
        has_proxy = schema.utility_proxy in reader.fieldnames
        for lineno, rec in enumerate(reader, start=2):
            try:
                row = ImpressionRow(
                    int(rec[schema.impression_id]), int(rec[schema.position]),
                    int(rec[schema.item_id]), _flag(rec[schema.clicked]),
                    _flag(rec[schema.booked]), _flag(rec[schema.random_sort]),
                    float(rec[schema.utility_proxy]) if has_proxy and rec[schema.utility_proxy] not in ("", None) else float("nan"),
                )
                if row.position < 1:
                    raise ValueError("position < 1")
            except (TypeError, ValueError) as exc:
                skipped += 1
                problems.append(f"line {lineno}: {exc}")
                continue
            rows.append(row)
    if not rows and not skipped:
        raise DataError(f"{path} has no rows")

    violations = 0
    kept = []
    for r in rows:
        if r.booked and not r.clicked:
            violations += 1
            problems.append(f"impression {r.impression_id}: booked without click at position {r.position}")
        else:
            kept.append(r)
    bookings: dict[int, int] = {}
    for r in kept:
        bookings[r.impression_id] = bookings.get(r.impression_id, 0) + r.booked
    multi = {i for i, n in bookings.items() if n > 1}
    if multi:
        violations += sum(1 for r in kept if r.impression_id in multi)
        problems.append(f"{len(multi)} impressions with more than one booking")
        kept = [r for r in kept if r.impression_id not in multi]
    if not kept:
        raise DataError(f"{path}: no valid rows")
    return ImpressionLog.from_rows(kept, n_skipped=skipped, n_violations=violations,
                                   problems=problems)


def _flag(text) -> int:
    v = int(float(text))
    if v not in (0, 1):
        raise ValueError(f"flag {text!r} is not 0/1")
    return v


def write_impressions(log: ImpressionLog, path, schema: ImpressionSchema = ImpressionSchema()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*schema.required, schema.utility_proxy])
        for r in log.rows():
            w.writerow([r.impression_id, r.position, r.item_id, r.clicked, r.booked,
                        r.random_sort, repr(r.utility_proxy)])


def batch_to_log(batch: Batch, random_sort: bool, first_id: int = 0) -> ImpressionLog:
    """Displayed slots of a simulated batch as impression rows (true ``v`` as proxy)."""
    q, k = np.nonzero(batch.displayed)
    n = len(q)
    return ImpressionLog(
        q + first_id, k + 1, batch.item_id[q, k], batch.clicked[q, k].astype(np.int64),
        batch.booked[q, k].astype(np.int64), np.full(n, int(random_sort), dtype=np.int64),
        batch.v[q, k].astype(float),
    )


def concat_logs(logs: Iterable[ImpressionLog]) -> ImpressionLog:
    logs = list(logs)
    cat = lambda name: np.concatenate([getattr(g, name) for g in logs])  # noqa: E731
    return ImpressionLog(*(cat(n) for n in ("impression_id", "position", "item_id", "clicked",
                                            "booked", "random_sort", "utility_proxy")))


def simulate_impressions(
    market: Market,
    n_impressions: int,
    nq: NqSpec,
    sigma: float,
    model: BehaviorModel,
    seed,
    random_share: float = 1 / 3,
) -> ImpressionLog:
    """A synthetic impression log: a ``random_share`` of pages is randomly
    sorted, the rest ranked by relevance; nobody is treated."""
    n_rand = int(round(random_share * n_impressions))
    s_rand, s_rel = as_seed_sequence(seed).spawn(2)
    parts = []
    if n_impressions - n_rand > 0:
        b = simulate(market, n_impressions - n_rand, nq, sigma, model, TreatmentSpec(), s_rel)
        parts.append(batch_to_log(b, False, 0))
    if n_rand > 0:
        b = simulate(market, n_rand, nq, sigma, model, TreatmentSpec(), s_rand, ranker="random")
        parts.append(batch_to_log(b, True, n_impressions - n_rand))
    return concat_logs(parts)


def split_holdout(log: ImpressionLog, share: float = 0.2, seed=0) -> tuple[ImpressionLog, ImpressionLog]:
    """Split by impression id into (train, holdout)."""
    if not 0.0 < share < 1.0:
        raise ConfigError("holdout share must lie in (0, 1)")
    ids = np.unique(log.impression_id)
    rng = np.random.default_rng(as_seed_sequence(seed))
    held = rng.random(len(ids)) < share
    mask = np.isin(log.impression_id, ids[held])
    return log.subset(~mask), log.subset(mask)


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    coefficients: np.ndarray
    log_likelihood: float
    gradient_norm: float
    converged: bool
    iterations: int
    names: tuple[str, ...] = ()
    history: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(zip(self.names, map(float, self.coefficients)))


def logistic_loglik(beta, X, y) -> float:
    z = X @ beta
    return float(np.sum(y * log_expit(z) + (1 - y) * log_expit(-z)))


def logistic_grad(beta, X, y) -> np.ndarray:
    return X.T @ (y - expit(X @ beta))


def logistic_hessian(beta, X) -> np.ndarray:
    mu = expit(X @ beta)
    return -(X * (mu * (1 - mu))[:, None]).T @ X


def newton_maximize(
    loglik: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    hess: Callable[[np.ndarray], np.ndarray],
    init: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
    names: tuple[str, ...] = (),
) -> FitResult:
    """Damped Newton ascent with step halving.

    Stops when the gradient max-norm drops to ``tol``.  A singular Hessian
    raises :class:`FitError`; running out of iterations or steps returns a
    non-converged result.
    """
    beta = np.array(init, dtype=float)
    ll = loglik(beta)
    history = [ll]
    flags: list[str] = []
    g = grad(beta)
    it = 0
    while np.max(np.abs(g), initial=0.0) > tol and it < max_iter:
        it += 1
        H = hess(beta)
        if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e14:
            raise FitError("information matrix is singular")
        step = np.linalg.solve(H, -g)
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t /= 2
            if t < 1e-10:
                flags.append("line search failed")
                return FitResult(beta, ll, float(np.max(np.abs(g))), False, it, names,
                                 history, flags)
        beta, ll = cand, max(ll_new, ll)
        history.append(ll)
        g = grad(beta)
    gnorm = float(np.max(np.abs(g), initial=0.0))
    converged = gnorm <= tol
    if not converged:
        flags.append("iteration limit reached")
        if np.max(np.abs(beta)) > 20:
            flags.append("coefficients diverging (possible separation)")
    return FitResult(beta, ll, gnorm, converged, it, names, history, flags)


def click_design(log: ImpressionLog, features: Sequence[str] = CLICK_FEATURES) -> np.ndarray:
    pos = log.position.astype(float)
    cols = {
        "intercept": np.ones(len(log)),
        "position": pos,
        "position_sq": pos**2,
        "utility": log.utility_proxy,
        "prior_clicks": log.prior_clicks().astype(float),
    }
    unknown = set(features) - set(cols)
    if unknown:
        raise ConfigError(f"unknown click features {sorted(unknown)}")
    X = np.column_stack([cols[f] for f in features])
    if not np.all(np.isfinite(X)):
        raise DataError("click design has missing values (utility proxy absent?)")
    return X


def fit_logistic(X, y, init=None, tol: float = 1e-8, max_iter: int = 100,
                 names: tuple[str, ...] = ()) -> FitResult:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    init = np.zeros(X.shape[1]) if init is None else init
    res = newton_maximize(
        lambda b: logistic_loglik(b, X, y),
        lambda b: logistic_grad(b, X, y),
        lambda b: logistic_hessian(b, X),
        init, tol, max_iter, names,
    )
    # Under perfect separation the gradient vanishes only as the
    # coefficients run off to infinity, so a small gradient is not enough.
    z = X @ res.coefficients
    if len(y) and np.max(np.abs(res.coefficients)) > 20 and np.all((z > 0) == (y > 0.5)):
        res.converged = False
        res.flags.append("perfect separation; coefficients diverge")
    return res


def fit_click_model(
    log: ImpressionLog,
    init=None,
    tol: float = 1e-8,
    max_iter: int = 100,
    features: Sequence[str] = CLICK_FEATURES,
    random_only: bool = True,
) -> FitResult:
    """Logistic click model on ``features``; by default only randomly sorted
    impressions are used, since there position is unrelated to quality.

    With the full feature set the coefficients map onto
    :class:`~tspr.behavior.ClickParams` via :func:`click_params_from_fit`.
    """
    if random_only and log.random_sort.any():
        log = log.subset(log.random_sort == 1)
    if len(log) == 0:
        raise DataError("no impressions to fit")
    X = click_design(log, features)
    y = log.clicked.astype(float)
    res = fit_logistic(X, y, init, tol, max_iter, tuple(features))
    if y.min() == y.max():
        res.flags.append("all outcomes identical")
    return res


def click_params_from_fit(res: FitResult) -> ClickParams:
    d = res.as_dict()
    return ClickParams(
        d.get("intercept", 0.0), d.get("position", 0.0), d.get("position_sq", 0.0),
        d.get("utility", 0.0), d.get("prior_clicks", 0.0),
    )


@dataclass
class ChoiceSets:
    """Flattened choice sets: one entry per clicked alternative.

    ``set_id`` groups alternatives, ``x`` is their utility proxy and
    ``chosen`` marks the booked one.  A set with nothing chosen picked the
    outside option.
    """

    set_id: np.ndarray
    x: np.ndarray
    chosen: np.ndarray

    def __post_init__(self) -> None:
        self.set_id = np.asarray(self.set_id, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=float)
        self.chosen = np.asarray(self.chosen, dtype=bool)
        if len(self.set_id) == 0:
            raise DataError("no choice sets")
        _, self.set_id = np.unique(self.set_id, return_inverse=True)
        if np.any(np.bincount(self.set_id, weights=self.chosen) > 1):
            raise DataError("a choice set has more than one chosen alternative")

    @property
    def n_sets(self) -> int:
        return int(self.set_id.max()) + 1

    @classmethod
    def from_log(cls, log: ImpressionLog) -> ChoiceSets:
        m = log.clicked == 1
        if not m.any():
            raise DataError("log has no clicks")
        return cls(log.impression_id[m], log.utility_proxy[m], log.booked[m] == 1)


def _choice_terms(g: float, cs: ChoiceSets):
    z = g * cs.x
    zmax = np.maximum(np.zeros(cs.n_sets), _group_max(z, cs.set_id, cs.n_sets))
    e = np.exp(z - zmax[cs.set_id])
    denom = np.exp(-zmax) + np.bincount(cs.set_id, weights=e, minlength=cs.n_sets)
    prob = e / denom[cs.set_id]
    return z, zmax, denom, prob


def _group_max(z, ids, n):
    out = np.full(n, -np.inf)
    np.maximum.at(out, ids, z)
    return out


def choice_loglik(g: float, cs: ChoiceSets) -> float:
    z, zmax, denom, _ = _choice_terms(float(np.ravel(g)[0]), cs)
    return float(np.sum(z[cs.chosen]) - np.sum(zmax + np.log(denom)))


def choice_grad(g: float, cs: ChoiceSets) -> np.ndarray:
    _, _, _, prob = _choice_terms(float(np.ravel(g)[0]), cs)
    return np.array([np.sum(cs.x[cs.chosen]) - np.sum(prob * cs.x)])


def choice_hessian(g: float, cs: ChoiceSets) -> np.ndarray:
    _, _, _, prob = _choice_terms(float(np.ravel(g)[0]), cs)
    n = cs.n_sets
    m1 = np.bincount(cs.set_id, weights=prob * cs.x, minlength=n)
    m2 = np.bincount(cs.set_id, weights=prob * cs.x**2, minlength=n)
    return np.array([[-np.sum(m2 - m1**2)]])


def fit_booking_model(cs: ChoiceSets | ImpressionLog, init: float = 0.0,
                      tol: float = 1e-8, max_iter: int = 100) -> FitResult:
    """Conditional-logit MLE of ``g_v``, the outside option's utility fixed at 0."""
    if isinstance(cs, ImpressionLog):
        cs = ChoiceSets.from_log(cs)
    flags = []
    n_chosen = int(cs.chosen.sum())
    if n_chosen in (0, cs.n_sets):
        flags.append("degenerate choices: every set chose "
                     + ("the outside option" if n_chosen == 0 else "an item"))
    if np.ptp(cs.x) == 0:
        raise FitError("utility proxy is constant; g_v is not identified")
    res = newton_maximize(
        lambda b: choice_loglik(b, cs), lambda b: choice_grad(b, cs),
        lambda b: choice_hessian(b, cs), np.array([init]), tol, max_iter, ("g_v",),
    )
    res.flags.extend(flags)
    return res


# ---------------------------------------------------------------- moments


@dataclass(frozen=True)
class MomentTargets:
    ctr_by_rank: np.ndarray
    bookings_per_impression: float
    clicks_per_impression: float

    @classmethod
    def from_log(cls, log: ImpressionLog, n_ranks: int = 10) -> MomentTargets:
        """Moments of the relevance-sorted impressions."""
        if log.random_sort.any() and not log.random_sort.all():
            log = log.subset(log.random_sort == 0)
        return cls(ctr_by_rank_from_log(log, n_ranks),
                   float(log.booked.sum() / log.n_impressions),
                   float(log.clicked.sum() / log.n_impressions))

    @classmethod
    def from_batch(cls, batch: Batch, n_ranks: int = 10) -> MomentTargets:
        return cls(batch.ctr_by_rank(n_ranks), float(batch.booked.sum(axis=1).mean()),
                   float(batch.clicked.sum(axis=1).mean()))


def ctr_by_rank_from_log(log: ImpressionLog, n_ranks: int = 10) -> np.ndarray:
    out = np.full(n_ranks, np.nan)
    for k in range(1, n_ranks + 1):
        m = log.position == k
        if m.any():
            out[k - 1] = log.clicked[m].mean()
    return out


def moment_loss(sim: MomentTargets, target: MomentTargets) -> float:
    """CTR points weighted equally; impression-level rates relative to target."""
    n = min(len(sim.ctr_by_rank), len(target.ctr_by_rank))
    a, b = np.asarray(sim.ctr_by_rank[:n]), np.asarray(target.ctr_by_rank[:n])
    both = np.isfinite(a) & np.isfinite(b)
    ctr = float(np.mean((a[both] - b[both]) ** 2)) if both.any() else 0.0
    # a rank shown in one but not the other is a full mismatch
    ctr += float(np.sum(np.isfinite(a) ^ np.isfinite(b)))
    rel = 0.0
    for s, t in ((sim.bookings_per_impression, target.bookings_per_impression),
                 (sim.clicks_per_impression, target.clicks_per_impression)):
        rel += ((s - t) / t) ** 2 if t != 0 else (s - t) ** 2
    return ctr + rel


@dataclass(frozen=True)
class GridCell:
    sigma: float
    nq: NqSpec

    def label(self) -> str:
        return f"sigma={self.sigma:g},n_q={'/'.join(map(str, self.nq.values))}"


@dataclass
class HyperparamFit:
    sigma: float
    nq: NqSpec
    loss: float
    surface: list[tuple[GridCell, float]]


def calibrate_hyperparams(
    targets: MomentTargets,
    grid: Sequence[GridCell] | Iterable[tuple[float, int | NqSpec]],
    market: Market,
    model: BehaviorModel,
    n_queries: int = 20_000,
    seed=0,
) -> HyperparamFit:
    """Grid search over ``(sigma, n_q)`` minimising :func:`moment_loss`.

    Every cell is simulated with the same seed, so cells differ only through
    their hyperparameters.  Ties go to the first cell in a canonical order,
    which makes the answer independent of the grid's enumeration order.
    """
    cells = []
    for c in grid:
        if not isinstance(c, GridCell):
            sigma, nq = c
            c = GridCell(float(sigma), nq if isinstance(nq, NqSpec) else NqSpec.fixed(int(nq)))
        cells.append(c)
    if not cells:
        raise ConfigError("hyperparameter grid is empty")
    cells.sort(key=lambda c: (c.sigma, c.nq.values, c.nq.probs or ()))
    n_ranks = len(targets.ctr_by_rank)
    surface = []
    for c in cells:
        b = simulate(market, n_queries, c.nq, c.sigma, model, TreatmentSpec(), seed)
        surface.append((c, moment_loss(MomentTargets.from_batch(b, n_ranks), targets)))
    best, loss = min(surface, key=lambda t: t[1])
    return HyperparamFit(best.sigma, best.nq, loss, surface)


# ---------------------------------------------------------------- delta


@dataclass
class DeltaFit:
    delta: float
    drop: float
    iterations: int
    path: list[tuple[float, float]]


def conversion_drop(market: Market, delta: float, n_queries: int, nq: NqSpec, sigma: float,
                    model: BehaviorModel, seed, affects_clicks: bool = True) -> float:
    """Mean outcome with nothing treated minus with everything treated,
    unmodified ranker, common random numbers."""
    t = TreatmentSpec(delta, affects_clicks)
    none = simulate(market, n_queries, nq, sigma, model, t, seed, policy="none")
    every = simulate(market, n_queries, nq, sigma, model, t, seed, policy="all")
    return float(none.y_total.mean() - every.y_total.mean())


def calibrate_delta(
    target_drop: float,
    drop_fn: Callable[[float], float],
    tol: float = 1e-4,
    bracket: tuple[float, float] = (0.0, 3.0),
    max_iter: int = 60,
) -> DeltaFit:
    """Bisection for the utility shift whose conversion drop hits the target.

    ``drop_fn(delta)`` must be deterministic (fixed seed), e.g. a partial of
    :func:`conversion_drop`.
    """
    if target_drop == 0:
        return DeltaFit(0.0, 0.0, 0, [])
    if target_drop < 0:
        raise ConfigError("target_drop must be >= 0")
    lo, hi = map(float, bracket)
    if not 0 <= lo < hi:
        raise ConfigError("bracket must satisfy 0 <= low < high")
    f_lo, f_hi = drop_fn(lo), drop_fn(hi)
    path = [(lo, f_lo), (hi, f_hi)]
    if not (f_lo - target_drop) * (f_hi - target_drop) <= 0:
        raise BracketingError(
            f"drop over [{lo}, {hi}] is [{f_lo:.4f}, {f_hi:.4f}], which misses {target_drop}"
        )
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        f_mid = drop_fn(mid)
        path.append((mid, f_mid))
        if abs(f_mid - target_drop) <= tol:
            return DeltaFit(mid, f_mid, it, path)
        if (f_mid < target_drop) == (f_lo < target_drop):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    best = min(path, key=lambda t: abs(t[1] - target_drop))
    return DeltaFit(best[0], best[1], max_iter, path)


def ctr_mae(sim_ctr, obs_ctr) -> float:
    a, b = np.asarray(sim_ctr, float), np.asarray(obs_ctr, float)
    n = min(len(a), len(b))
    m = np.isfinite(a[:n]) & np.isfinite(b[:n])
    if not m.any():
        return math.nan
    return float(np.mean(np.abs(a[:n][m] - b[:n][m])))


def booking_params_from_fit(res: FitResult) -> BookingParams:
    return BookingParams(float(res.coefficients[0]), 0.0, "logit")
