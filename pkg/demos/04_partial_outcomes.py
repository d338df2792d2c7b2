"""Where in the listing does the effect come from?

Prints mean partial outcomes Y^l in four scenarios and checks how well a
partial effect is predicted by scaling the total effect with E[Y^l] / E[Y].

    python demos/04_partial_outcomes.py
"""

from tspr.config import RunConfig
from tspr.harness import diagnose_proportionality, run_partial_outcome_curves

cfg = RunConfig(curve_runs=2)
rows = run_partial_outcome_curves(cfg)
curves = {}
for r in rows:
    curves.setdefault(r["scenario"], []).append(r["mean_Y_l"])

names = list(curves)
print("   l  " + "  ".join(f"{n:>14}" for n in names))
for l in (0, 1, 2, 3, 4, 5, 7, 10, 15, 20, 25):
    print(f"  {l:>2}  " + "  ".join(f"{curves[n][l]:>14.4f}" for n in names))

print("\npartial effect of treating the first l items")
print("   l   measured  predicted     SE")
for r in diagnose_proportionality(cfg, (1, 2, 3, 5, 10, 25)):
    print(f"  {r['l']:>2}  {r['theta_l_measured']:+.4f}    {r['theta_l_predicted']:+.4f}  "
          f"{r['se_measured']:.4f}")
