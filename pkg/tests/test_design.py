import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tspr.design import (
    PRIORITY_ORDER,
    DesignParams,
    assign_arm,
    block_length,
    draw_arms,
    filter_relevant,
    partition_items,
    prioritized_group,
    rank_tspr,
)
from tspr.errors import ConfigError
from tspr.marketplace import Arm, Group, Item, Listing, ListingEntry, draw_item_pool

from conftest import make_candidates

T, U, P = Group.TREATED, Group.UNTREATED, Group.PLACEBO


def test_priority_orders():
    assert PRIORITY_ORDER[Arm.A] == (U, P, T)
    assert PRIORITY_ORDER[Arm.B] == (T, P, U)
    assert prioritized_group(Arm.A) is U
    assert prioritized_group(Arm.B) is T


@pytest.mark.parametrize("p", [0.0, 0.5, 0.7, -0.1])
def test_treatment_share_bounds(p):
    with pytest.raises(ConfigError):
        DesignParams(p=p)


def test_design_params_validation():
    with pytest.raises(ConfigError):
        DesignParams(arm_prob=1.0)
    with pytest.raises(ConfigError):
        DesignParams(r_min=math.nan)


def test_partition_shares(rng):
    items = partition_items(draw_item_pool(100_000, rng), 0.25, rng)
    groups = np.array([it.group for it in items])
    shares = [(groups == g).mean() for g in (T, U, P)]
    assert np.allclose(shares, [0.25, 0.25, 0.5], atol=0.01)
    assert sum((groups == g).sum() for g in (T, U, P)) == len(items)


def test_partition_small_p_mostly_placebo(rng):
    items = partition_items(draw_item_pool(10, rng), 0.01, np.random.default_rng(1))
    assert sum(it.group is P for it in items) >= 8


def test_partition_deterministic():
    pool = draw_item_pool(200, np.random.default_rng(0))
    a = partition_items(pool, 0.25, np.random.default_rng(5))
    b = partition_items(pool, 0.25, np.random.default_rng(5))
    assert a == b


def test_partition_twice_rejected(rng):
    items = partition_items(draw_item_pool(5, rng), 0.25, rng)
    with pytest.raises(ConfigError):
        partition_items(items, 0.25, rng)


def test_arm_shares(rng):
    arms = draw_arms(100_000, 0.5, rng)
    assert abs((arms == Arm.A).mean() - 0.5) <= 0.01
    assert all(assign_arm(1.0, rng) is Arm.A for _ in range(100))
    assert np.array_equal(draw_arms(50, 0.5, np.random.default_rng(2)),
                          draw_arms(50, 0.5, np.random.default_rng(2)))


def test_filter_is_strict():
    kept = filter_relevant(make_candidates([1.6, 1.7, 1.8]), 1.7)
    assert [c.relevance for c in kept] == [1.8]


def test_filter_limits():
    cands = make_candidates([0.3, -2.0, 5.0])
    assert filter_relevant(cands, -math.inf) == cands
    assert filter_relevant(cands, 5.0) == []


def test_priority_beats_relevance():
    cands = make_candidates([0.2, 0.9, 0.5], [T, P, U])
    listing = rank_tspr(cands, Arm.B)
    assert listing.groups == [T, P, U]
    assert rank_tspr(cands, Arm.A).groups == [U, P, T]


def test_single_group_is_relevance_order():
    cands = make_candidates([0.1, 0.9, 0.5, 0.9])
    listing = rank_tspr(cands, Arm.A)
    assert [e.item_id for e in listing.entries] == [2, 4, 3, 1]


def _listing(groups):
    return Listing(0, [ListingEntry(i, i + 1, 0.0, g) for i, g in enumerate(groups)])


def test_block_length_examples():
    assert block_length(_listing([T, T, T, P, P, U]), Arm.B) == 3
    assert block_length(_listing([P, P, T]), Arm.A) == 0


# property tests over random candidate sets

candidate_sets = st.lists(
    st.tuples(st.floats(-3, 3, allow_nan=False), st.sampled_from([T, U, P])),
    min_size=0, max_size=15,
)


@settings(max_examples=300)
@given(candidate_sets, st.sampled_from([Arm.A, Arm.B]), st.floats(-4, 4))
def test_rank_tspr_structure(data, arm, r_min):
    cands = make_candidates([r for r, _ in data], [g for _, g in data])
    shown = filter_relevant(cands, r_min)
    listing = rank_tspr(shown, arm)
    # permutation of the filtered input
    assert sorted(e.item_id for e in listing.entries) == sorted(c.item_id for c in shown)
    assert [e.position for e in listing.entries] == list(range(1, len(shown) + 1))
    # contiguous blocks in the arm's order
    order = PRIORITY_ORDER[arm]
    ranks = [order.index(g) for g in listing.groups]
    assert ranks == sorted(ranks)
    # relevance non-increasing within a block
    for a, b in zip(listing.entries, listing.entries[1:]):
        if a.group == b.group:
            assert a.relevance >= b.relevance
    # block length equals the leading run of the prioritized group
    lead = 0
    for g in listing.groups:
        if g != prioritized_group(arm):
            break
        lead += 1
    assert block_length(listing, arm) == lead


@settings(max_examples=300)
@given(candidate_sets, st.floats(-4, 4))
def test_universal_access(data, r_min):
    cands = make_candidates([r for r, _ in data], [g for _, g in data])
    shown = filter_relevant(cands, r_min)
    a = {e.item_id for e in rank_tspr(shown, Arm.A).entries}
    b = {e.item_id for e in rank_tspr(shown, Arm.B).entries}
    assert a == b


def test_groups_are_global(rng):
    # an item keeps its label in every listing it appears in
    items = partition_items(draw_item_pool(30, rng), 0.25, rng)
    label = {it.id: it.group for it in items}
    for arm in (Arm.A, Arm.B):
        cands = make_candidates(rng.normal(size=30), [it.group for it in items],
                                [it.id for it in items])
        for e in rank_tspr(cands, arm).entries:
            assert e.group == label[e.item_id]


def test_item_default_unassigned():
    assert Item(0, 1.0).group is Group.UNASSIGNED
