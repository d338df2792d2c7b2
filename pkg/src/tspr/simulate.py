"""Vectorised simulation of whole query batches.

A batch is a set of ``(n_queries, n_max)`` arrays, one row per query and one
column per listing slot.  Displayed items occupy the leading columns of each
row in rank order; the remaining slots are padding.

Every random quantity comes from its own child stream of the scenario seed
(candidate sets, relevance noise, arms, random sort keys, click draws and
booking draws).  Two scenarios run with the same seed therefore share all of
their randomness, which is how counterfactual pairs use common random
numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from tspr.behavior import (
    OUTCOME_KINDS,
    SCAN_DIRECTIONS,
    BookingParams,
    ClickParams,
    TreatmentSpec,
)
from tspr.design import PRIORITY_RANK, draw_arms, prioritized_group
from tspr.errors import ConfigError
from tspr.marketplace import Arm, Group, NqSpec, UtilityDist, sample_candidates

RANKERS = ("original", "tspr", "random")

_N_STREAMS = 6
_CAND, _NOISE, _ARMS, _SORT, _CLICK, _BOOK = range(_N_STREAMS)


@dataclass(frozen=True)
class BehaviorModel:
    click: ClickParams = field(default_factory=ClickParams)
    booking: BookingParams = field(default_factory=BookingParams)
    outcome_kind: str = "booking"
    scan: str = "top_down"

    def __post_init__(self) -> None:
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ConfigError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if self.scan not in SCAN_DIRECTIONS:
            raise ConfigError(f"scan must be one of {SCAN_DIRECTIONS}")


@dataclass(frozen=True)
class Market:
    """A frozen item pool: hidden utilities and group labels."""

    v: np.ndarray
    groups: np.ndarray

    @classmethod
    def draw(
        cls,
        n_items: int,
        rng: np.random.Generator,
        utility: UtilityDist = UtilityDist(),
        p: float | None = None,
    ) -> Market:
        from tspr.design import draw_groups

        if n_items < 1:
            raise ConfigError("item pool needs at least one item")
        v = utility.sample(n_items, rng)
        if p is None:
            groups = np.full(n_items, Group.UNASSIGNED, dtype=np.int64)
        else:
            groups = draw_groups(n_items, p, rng)
        return cls(v, groups)

    def __len__(self) -> int:
        return len(self.v)


@dataclass
class Batch:
    """Ranked listings plus simulated behaviour for a set of queries."""

    item_id: np.ndarray
    v: np.ndarray
    group: np.ndarray
    relevance: np.ndarray
    displayed: np.ndarray
    arm: np.ndarray
    treated: np.ndarray
    clicked: np.ndarray
    booked: np.ndarray
    y: np.ndarray

    @property
    def n_queries(self) -> int:
        return self.item_id.shape[0]

    @property
    def n_displayed(self) -> np.ndarray:
        return self.displayed.sum(axis=1)

    @property
    def y_total(self) -> np.ndarray:
        return self.y.sum(axis=1)

    def partial(self, l: np.ndarray | int) -> np.ndarray:
        """Per-query sum of ``y`` over the first ``l`` positions."""
        l = np.broadcast_to(np.asarray(l), (self.n_queries,))
        if np.any(l < 0) or np.any(l > self.n_displayed):
            raise ValueError("prefix length outside the listing")
        csum = np.concatenate(
            [np.zeros((self.n_queries, 1)), np.cumsum(self.y, axis=1)], axis=1
        )
        return csum[np.arange(self.n_queries), l]

    def partial_curve(self, l_max: int | None = None) -> np.ndarray:
        """Mean partial outcome ``E[Y^l]`` for ``l = 0..l_max``.

        Queries shorter than ``l`` contribute their full total.
        """
        l_max = self.y.shape[1] if l_max is None else l_max
        csum = np.cumsum(self.y, axis=1).mean(axis=0)
        curve = np.concatenate([[0.0], csum])
        if l_max + 1 > len(curve):
            curve = np.concatenate([curve, np.full(l_max + 1 - len(curve), curve[-1])])
        return curve[: l_max + 1]

    def block_lengths(self) -> np.ndarray:
        """Count of the arm's prioritized group among displayed items."""
        target = np.where(
            self.arm == Arm.A, int(prioritized_group(Arm.A)), int(prioritized_group(Arm.B))
        )
        return ((self.group == target[:, None]) & self.displayed).sum(axis=1)

    def ctr_by_rank(self, n_ranks: int | None = None) -> np.ndarray:
        """Click-through rate at each position among queries that show it."""
        n_ranks = self.y.shape[1] if n_ranks is None else n_ranks
        shown = self.displayed[:, :n_ranks].sum(axis=0)
        clicks = (self.clicked & self.displayed)[:, :n_ranks].sum(axis=0)
        out = np.full(n_ranks, np.nan)
        width = min(n_ranks, len(shown))
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:width] = np.where(shown > 0, clicks / np.maximum(shown, 1), np.nan)
        return out


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """A fresh ``SeedSequence`` for ``seed``.

    ``SeedSequence`` arguments are copied rather than spawned from directly,
    so the same object passed twice yields the same children.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


def streams(seed) -> list[np.random.Generator]:
    """Child generators for one scenario (see :func:`as_seed_sequence`)."""
    return [np.random.default_rng(s) for s in as_seed_sequence(seed).spawn(_N_STREAMS)]


def _rank(keys_priority, keys_secondary) -> np.ndarray:
    """Row-wise order by (priority asc, secondary asc, column asc).

    Columns arrive sorted by item id, so the column index is the id tie-break.
    """
    order = np.argsort(keys_secondary, axis=1, kind="stable")
    prio = np.take_along_axis(keys_priority, order, axis=1)
    return np.take_along_axis(order, np.argsort(prio, axis=1, kind="stable"), axis=1)


def build_listings(
    market: Market,
    n_queries: int,
    nq: NqSpec,
    sigma: float,
    ranker: str,
    gens: list[np.random.Generator],
    r_min: float = -np.inf,
    arm_prob: float = 0.5,
    arms: np.ndarray | None = None,
):
    """Candidate sets, relevance scores and rankings for a query batch.

    Returns ``(item_id, v, group, relevance, displayed, arm)``, each sorted
    into listing order.  ``r_min`` filters only under the ``"tspr"`` ranker.
    """
    if sigma < 0:
        raise ConfigError("relevance noise sigma must be >= 0")
    if ranker not in RANKERS:
        raise ConfigError(f"ranker must be one of {RANKERS}")
    nq_draw = nq.sample(n_queries, gens[_CAND])
    cand = sample_candidates(len(market), nq_draw, gens[_CAND])
    valid = cand >= 0
    safe = np.where(valid, cand, 0)
    v = np.where(valid, market.v[safe], 0.0)
    group = np.where(valid, market.groups[safe], Group.UNASSIGNED)
    noise = gens[_NOISE].standard_normal(cand.shape)
    relevance = v + sigma * noise
    sort_keys = gens[_SORT].random(cand.shape)
    if arms is None:
        arms = draw_arms(n_queries, arm_prob, gens[_ARMS])
    arms = np.asarray(arms, dtype=np.int64)

    if ranker == "tspr":
        if np.any(group[valid] == Group.UNASSIGNED):
            raise ConfigError("the prioritized ranker needs a partitioned market")
        displayed = valid & (relevance > r_min)
        arm_row = np.where(arms == Arm.B, 1, 0)
        prio = PRIORITY_RANK[arm_row[:, None], np.minimum(group, 2)]
        secondary = -relevance
    else:
        displayed = valid
        prio = np.zeros_like(cand)
        secondary = -relevance if ranker == "original" else sort_keys
    prio = np.where(displayed, prio, 9)
    secondary = np.where(displayed, secondary, 0.0)
    order = _rank(prio, secondary)

    take = lambda a: np.take_along_axis(a, order, axis=1)  # noqa: E731
    return (
        np.where(take(displayed), take(cand), -1),
        take(v),
        take(group),
        take(relevance),
        take(displayed),
        arms,
    )


def behave(
    v_click: np.ndarray,
    v_book: np.ndarray,
    displayed: np.ndarray,
    u_click: np.ndarray,
    u_book: np.ndarray,
    model: BehaviorModel,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Click scan and booking choice for every row at once.

    ``u_click`` and ``u_book`` are uniforms of the listing shape; logit
    booking uses only the first column of ``u_book``.
    """
    cp, bp = model.click, model.booking
    n_q, n = displayed.shape
    clicked = np.zeros((n_q, n), dtype=bool)
    prior = np.zeros(n_q)
    cols = range(n) if model.scan == "top_down" else range(n - 1, -1, -1)
    for k in cols:
        pos = k + 1
        logit = cp.b0 + cp.b_rank * pos + cp.b_rank2 * pos * pos + cp.b_v * v_click[:, k]
        if cp.b_prior != 0.0:
            logit = logit + cp.b_prior * prior
        c = displayed[:, k] & (u_click[:, k] < expit(logit))
        clicked[:, k] = c
        prior += c

    if bp.mode == "bernoulli":
        booked = clicked & (u_book < expit(bp.g_v * v_book - bp.outside_utility))
    else:
        util = np.where(clicked, bp.g_v * v_book, -np.inf)
        m = np.maximum(util.max(axis=1), bp.outside_utility)
        w = np.exp(util - m[:, None])
        w0 = np.exp(bp.outside_utility - m)
        cum = w0[:, None] + np.cumsum(w, axis=1)
        total = cum[:, -1] if n else w0
        u = u_book[:, 0] * total if n else np.zeros(n_q)
        # first column whose cumulative weight exceeds u; outside if u < w0
        pick = (cum <= u[:, None]).sum(axis=1)
        any_click = clicked.any(axis=1)
        last_click = n - 1 - np.argmax(clicked[:, ::-1], axis=1) if n else np.zeros(n_q, int)
        pick = np.where(pick >= n, last_click, pick)
        choose = any_click & (u >= w0)
        booked = np.zeros((n_q, n), dtype=bool)
        rows = np.flatnonzero(choose)
        booked[rows, pick[rows]] = True
        booked &= clicked

    if model.outcome_kind == "booking":
        y = booked.astype(float)
    else:
        y = clicked.astype(float)
    return clicked, booked, y


def treatment_mask(
    policy: str | int, group: np.ndarray, displayed: np.ndarray
) -> np.ndarray:
    """Which listing slots carry the treatment.

    ``policy`` is ``"none"``, ``"all"``, ``"assigned"`` (items labelled
    Treated) or an integer ``l`` (the first ``l`` positions of each listing).
    """
    if isinstance(policy, str):
        if policy == "none":
            return np.zeros_like(displayed)
        if policy == "all":
            return displayed.copy()
        if policy == "assigned":
            return displayed & (group == Group.TREATED)
        raise ConfigError(f"unknown treatment policy {policy!r}")
    l = int(policy)
    return displayed & (np.arange(displayed.shape[1])[None, :] < l)


def simulate(
    market: Market,
    n_queries: int,
    nq: NqSpec,
    sigma: float,
    model: BehaviorModel,
    treatment: TreatmentSpec,
    seed,
    ranker: str = "original",
    policy: str | int = "none",
    r_min: float = -np.inf,
    arm_prob: float = 0.5,
    arms: np.ndarray | None = None,
) -> Batch:
    """Simulate one scenario for ``n_queries`` fresh queries.

    Scenarios sharing ``seed`` (and market) share every random draw.
    """
    gens = streams(seed)
    item_id, v, group, relevance, displayed, arm = build_listings(
        market, n_queries, nq, sigma, ranker, gens, r_min=r_min,
        arm_prob=arm_prob, arms=arms,
    )
    treated = treatment_mask(policy, group, displayed)
    v_eff = v - treatment.delta * treated
    v_click = v_eff if treatment.affects_clicks else v
    u_click = gens[_CLICK].random(displayed.shape)
    u_book = gens[_BOOK].random(displayed.shape)
    clicked, booked, y = behave(v_click, v_eff, displayed, u_click, u_book, model)
    return Batch(item_id, v, group, relevance, displayed, arm, treated, clicked, booked, y)
