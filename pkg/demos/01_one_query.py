"""Follow a single query through both arms of the prioritized design.

Run:  python demos/01_one_query.py
"""

import numpy as np

from tspr.behavior import BookingParams, ClickParams, TreatmentSpec, simulate_query_outcomes
from tspr.design import block_length, filter_relevant, partition_items, rank_tspr
from tspr.marketplace import Arm, UtilityDist, draw_item_pool, rank_original, score_candidates

rng = np.random.default_rng(4)
pool = partition_items(draw_item_pool(40, rng, UtilityDist("normal", 1.0, 1.0)), 0.25, rng)
candidates = score_candidates([pool[i] for i in rng.choice(len(pool), 10, replace=False)], 2.0, rng)

print("unmodified ranking")
for e in rank_original(candidates).entries:
    print(f"  {e.position:>2}  item {e.item_id:>2}  r={e.relevance:+.2f}  {e.group.name}")

# The filter does not depend on the arm, so both arms see the same items.
shown = filter_relevant(candidates, r_min=0.0)
print(f"\n{len(shown)} of {len(candidates)} candidates clear r_min = 0")

treatment = TreatmentSpec(delta=0.3)
for arm in (Arm.A, Arm.B):
    listing = rank_tspr(shown, arm)
    simulate_query_outcomes(listing, ClickParams(), BookingParams(), treatment,
                            np.random.default_rng(0))
    print(f"\narm {arm.name}: block length l = {block_length(listing, arm)}")
    for e in listing.entries:
        mark = "clicked" if e.clicked else ""
        mark += " booked" if e.booked else ""
        print(f"  {e.position:>2}  {e.group.name:<9} r={e.relevance:+.2f}  {mark}")
