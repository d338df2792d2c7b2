"""Compare the prioritized-ranking estimator with the naive item-side one.

Both experiments run on the same simulated marketplace, whose true effect
is a 0.05 drop in conversion.  Pass a run count to trade time for precision
(about half a second per run):

    python demos/02_bias_comparison.py 40
"""

import sys

import numpy as np

from tspr.config import RunConfig
from tspr.harness import run_ground_truth, run_monte_carlo, tune_r_min

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
cfg = RunConfig(runs=runs)

tune = tune_r_min(cfg)
print("threshold tuning (pre-experiment vs unmodified ranker, no treatment)")
for row in tune.table:
    print(f"  r_min={row['r_min']:+.0f}  max curve gap={row['gap_max']:.4f}  "
          f"items shown={row['mean_displayed']:.1f}")
print(f"chosen r_min = {tune.r_min:g}\n")

gt = run_ground_truth(cfg)
print(f"ground truth: conversion {gt.conversion_none:.4f} -> {gt.conversion_all:.4f}, "
      f"TATE = {gt.tate:+.4f} (delta = {gt.delta:.4f})\n")

mc = run_monte_carlo(cfg)
edges = np.linspace(-0.13, 0.0, 27)
for method in mc.methods:
    s = mc.stats(method)
    print(f"{method:>5}: mean {s['mean']:+.4f}  sd {s['std']:.4f}  mean SE {s['mean_se']:.4f}  "
          f"CI coverage {s['coverage']:.2f}")
    counts, _ = np.histogram(mc.estimates(method), bins=edges)
    for lo, c in zip(edges, counts):
        if c:
            print(f"       {lo:+.3f} {'#' * int(c)}")
