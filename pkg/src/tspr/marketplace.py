"""Items, queries, relevance scores and the unmodified ranker."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from tspr.errors import ConfigError, EstimationError


class Group(enum.IntEnum):
    TREATED = 0
    UNTREATED = 1
    PLACEBO = 2
    UNASSIGNED = 3


class Arm(enum.IntEnum):
    A = 0
    B = 1
    PRE_EXPERIMENT = 2


@dataclass(frozen=True)
class Item:
    id: int
    v: float
    group: Group = Group.UNASSIGNED


@dataclass(frozen=True)
class Query:
    id: int
    candidate_ids: tuple[int, ...]
    arm: Arm | None = None


@dataclass(frozen=True)
class ScoredCandidate:
    item_id: int
    relevance: float
    group: Group = Group.UNASSIGNED
    v: float = 0.0


@dataclass
class ListingEntry:
    item_id: int
    position: int
    relevance: float
    group: Group
    v: float = 0.0
    clicked: bool = False
    booked: bool = False
    y: float = 0.0


@dataclass
class Listing:
    query_id: int
    entries: list[ListingEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def groups(self) -> list[Group]:
        return [e.group for e in self.entries]

    @property
    def outcome(self) -> float:
        """Query-level outcome: the sum of entry outcomes."""
        return float(sum(e.y for e in self.entries))


@dataclass(frozen=True)
class UtilityDist:
    """Distribution of hidden item utilities.

    ``kind`` is one of ``"normal"`` (``loc``, ``scale``), ``"uniform"``
    (``low=loc``, ``high=scale``) or ``"constant"`` (every item gets ``loc``).
    """

    kind: str = "normal"
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("normal", "uniform", "constant"):
            raise ConfigError(f"unknown utility distribution {self.kind!r}")
        if self.kind == "normal" and self.scale < 0:
            raise ConfigError("normal utility scale must be >= 0")
        if self.kind == "uniform" and self.scale < self.loc:
            raise ConfigError("uniform utility needs high >= low")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.loc, self.scale, size=n)
        if self.kind == "uniform":
            return rng.uniform(self.loc, self.scale, size=n)
        return np.full(n, float(self.loc))


@dataclass(frozen=True)
class NqSpec:
    """Number of candidate items per query.

    Either a fixed count (``values=(n,)``) or a discrete distribution over
    ``values`` with probabilities ``probs``.
    """

    values: tuple[int, ...] = (25,)
    probs: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.values or min(self.values) < 1:
            raise ConfigError("n_q values must be positive")
        if self.probs is not None:
            if len(self.probs) != len(self.values):
                raise ConfigError("n_q probs and values differ in length")
            if min(self.probs) < 0 or not np.isclose(sum(self.probs), 1.0):
                raise ConfigError("n_q probs must be a probability vector")

    @classmethod
    def fixed(cls, n: int) -> NqSpec:
        return cls(values=(int(n),))

    @property
    def max(self) -> int:
        return max(self.values)

    def sample(self, n_queries: int, rng: np.random.Generator) -> np.ndarray:
        if len(self.values) == 1:
            return np.full(n_queries, self.values[0], dtype=np.int64)
        p = None if self.probs is None else np.asarray(self.probs, dtype=float)
        return rng.choice(np.asarray(self.values, dtype=np.int64), size=n_queries, p=p)


def draw_item_pool(
    n: int, rng: np.random.Generator, utility: UtilityDist = UtilityDist()
) -> list[Item]:
    if n < 1:
        raise ConfigError("item pool needs at least one item")
    v = utility.sample(n, rng)
    return [Item(id=i, v=float(x)) for i, x in enumerate(v)]


def score_relevance(item: Item, sigma: float, rng: np.random.Generator) -> float:
    """Noisy match score ``v + eps`` with ``eps ~ N(0, sigma^2)``."""
    if sigma < 0:
        raise ConfigError("relevance noise sigma must be >= 0")
    if sigma == 0:
        return item.v
    return item.v + sigma * float(rng.standard_normal())


def score_candidates(
    items: Sequence[Item], sigma: float, rng: np.random.Generator
) -> list[ScoredCandidate]:
    return [
        ScoredCandidate(it.id, score_relevance(it, sigma, rng), it.group, it.v)
        for it in items
    ]


def _to_listing(query_id: int, ordered: Sequence[ScoredCandidate]) -> Listing:
    return Listing(
        query_id,
        [
            ListingEntry(c.item_id, pos, c.relevance, c.group, c.v)
            for pos, c in enumerate(ordered, start=1)
        ],
    )


def rank_original(candidates: Sequence[ScoredCandidate], query_id: int = 0) -> Listing:
    """Relevance-descending listing; ties go to the smaller item id."""
    if not candidates:
        raise EstimationError("cannot rank an empty candidate list")
    ordered = sorted(candidates, key=lambda c: (-c.relevance, c.item_id))
    return _to_listing(query_id, ordered)


def assign_groups(items: Sequence[Item], groups: Sequence[int]) -> list[Item]:
    return [replace(it, group=Group(int(g))) for it, g in zip(items, groups)]


def sample_candidates(
    n_items: int, nq: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Candidate item ids per query, sampled without replacement.

    Returns an int array of shape ``(len(nq), max(nq))`` with each row's ids
    in ascending order; slots past a query's own ``n_q`` hold ``-1``.
    """
    nq = np.asarray(nq, dtype=np.int64)
    n_q = len(nq)
    n_max = int(nq.max()) if n_q else 0
    if n_max > n_items:
        raise ConfigError(f"n_q={n_max} exceeds the item pool size {n_items}")
    slots = np.arange(n_max)
    active = slots[None, :] < nq[:, None]
    if n_max * n_max > n_items:
        # dense pools: order statistics of random keys
        ids = np.empty((n_q, n_max), dtype=np.int64)
        for start in range(0, n_q, 1024):
            stop = min(start + 1024, n_q)
            keys = rng.random((stop - start, n_items))
            if n_max < n_items:
                ids[start:stop] = np.argpartition(keys, n_max - 1, axis=1)[:, :n_max]
            else:
                ids[start:stop] = np.argsort(keys, axis=1)
    else:
        # sparse pools: draw with replacement, redraw rows holding duplicates
        ids = rng.integers(0, n_items, size=(n_q, n_max))
        todo = np.arange(n_q)
        while True:
            sub = np.where(active[todo], ids[todo], -1 - slots[None, :])
            sub.sort(axis=1)
            dup = (np.diff(sub, axis=1) == 0).any(axis=1)
            todo = todo[dup]
            if not len(todo):
                break
            ids[todo] = rng.integers(0, n_items, size=(len(todo), n_max))
    ids = np.where(active, ids, np.iinfo(np.int64).max)
    ids.sort(axis=1)
    return np.where(active, ids, -1)
