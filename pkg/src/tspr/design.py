"""Randomization and priority ranking for the two-sided prioritized design.

Items are split into Treated / Untreated / Placebo with probabilities
``p, p, 1 - 2p``.  Queries are split into arms A and B.  Arm A lists
Untreated items first, then Placebo, then Treated; arm B reverses the
Treated and Untreated blocks.  Within a block items are ordered by
relevance, and only items whose relevance exceeds ``r_min`` are shown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tspr.errors import ConfigError
from tspr.marketplace import (
    Arm,
    Group,
    Item,
    Listing,
    ScoredCandidate,
    _to_listing,
    assign_groups,
)

PRIORITY_ORDER: dict[Arm, tuple[Group, Group, Group]] = {
    Arm.A: (Group.UNTREATED, Group.PLACEBO, Group.TREATED),
    Arm.B: (Group.TREATED, Group.PLACEBO, Group.UNTREATED),
}

# PRIORITY_RANK[arm, group] -> 0, 1, 2 (group UNASSIGNED never appears).
PRIORITY_RANK = np.array(
    [
        [PRIORITY_ORDER[arm].index(g) for g in (Group.TREATED, Group.UNTREATED, Group.PLACEBO)]
        for arm in (Arm.A, Arm.B)
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class DesignParams:
    p: float = 0.25
    r_min: float = 1.7
    arm_prob: float = 0.5

    def __post_init__(self) -> None:
        check_treatment_share(self.p)
        if not 0.0 < self.arm_prob < 1.0:
            raise ConfigError(f"arm_prob must lie in (0, 1), got {self.arm_prob}")
        if math.isnan(self.r_min):
            raise ConfigError("r_min must not be NaN")


def check_treatment_share(p: float) -> None:
    if not 0.0 < p < 0.5:
        raise ConfigError(f"treatment share p must lie in (0, 0.5), got {p}")


def prioritized_group(arm: Arm) -> Group:
    """The group placed at the top of listings in ``arm``."""
    return PRIORITY_ORDER[Arm(arm)][0]


def draw_groups(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independent group labels for ``n`` items (values of :class:`Group`)."""
    check_treatment_share(p)
    u = rng.random(n)
    return np.where(
        u < p, Group.TREATED, np.where(u < 2 * p, Group.UNTREATED, Group.PLACEBO)
    ).astype(np.int64)


def partition_items(items: Sequence[Item], p: float, rng: np.random.Generator) -> list[Item]:
    if any(it.group is not Group.UNASSIGNED for it in items):
        raise ConfigError("items are already partitioned")
    return assign_groups(items, draw_groups(len(items), p, rng))


def assign_arm(arm_prob: float, rng: np.random.Generator) -> Arm:
    if not 0.0 <= arm_prob <= 1.0:
        raise ConfigError(f"arm_prob must lie in [0, 1], got {arm_prob}")
    return Arm.A if rng.random() < arm_prob else Arm.B


def draw_arms(n: int, arm_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= arm_prob <= 1.0:
        raise ConfigError(f"arm_prob must lie in [0, 1], got {arm_prob}")
    return np.where(rng.random(n) < arm_prob, Arm.A, Arm.B).astype(np.int64)


def filter_relevant(
    candidates: Sequence[ScoredCandidate], r_min: float
) -> list[ScoredCandidate]:
    """Keep candidates with relevance strictly above ``r_min``, in order."""
    return [c for c in candidates if c.relevance > r_min]


def rank_tspr(
    candidates: Sequence[ScoredCandidate], arm: Arm, query_id: int = 0
) -> Listing:
    order = PRIORITY_ORDER[Arm(arm)]
    ranked = sorted(
        candidates, key=lambda c: (order.index(c.group), -c.relevance, c.item_id)
    )
    return _to_listing(query_id, ranked)


def block_length(listing: Listing, arm: Arm) -> int:
    """Number of prioritized-group items displayed for the query."""
    target = prioritized_group(arm)
    return sum(1 for e in listing.entries if e.group == target)
