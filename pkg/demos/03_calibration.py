"""Fit the behaviour model to an impression log and recover the simulator's
hyperparameters, then calibrate the treatment size.

Without an argument the log is generated by the simulator itself, so the
answer is known (sigma = 8, n_q = 25).  Pass a CSV with columns srch_id,
position, prop_id, click_bool, booking_bool, random_bool, utility_proxy to
fit your own data:

    python demos/03_calibration.py [impressions.csv]
"""

import sys

from tspr.config import RunConfig
from tspr.harness import run_calibration

cfg = RunConfig(n_queries=60_000)
out = run_calibration(cfg, sys.argv[1] if len(sys.argv) > 1 else None)

print("click model (randomly sorted pages)")
for name, value in out.click_fit.as_dict().items():
    print(f"  {name:<13} {value:+.4f}")
print(f"  converged in {out.click_fit.iterations} Newton steps, "
      f"|grad| = {out.click_fit.gradient_norm:.1e}")
print(f"booking model: g_v = {out.booking_fit.coefficients[0]:.4f}\n")

print("moment loss by (sigma, n_q)")
for cell, loss in out.hyper.surface:
    flag = "  <- chosen" if (cell.sigma, cell.nq) == (out.hyper.sigma, out.hyper.nq) else ""
    print(f"  {cell.label():<18} {loss:.2e}{flag}")

print("\nhold-out CTR by rank: observed vs simulated")
for k, (o, s) in enumerate(zip(out.holdout_ctr, out.simulated_ctr), start=1):
    print(f"  {k:>2}  {o:.4f}  {s:.4f}")
print(f"mean absolute error {out.holdout_mae:.4f}")
if out.delta is not None:
    print(f"\ndelta for a {cfg.target_drop} conversion drop: {out.delta.delta:.4f}")
