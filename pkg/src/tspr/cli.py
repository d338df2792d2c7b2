"""Command-line entry point: ``tspr <command> [--config FILE] [overrides]``.

Every command writes its outputs plus a ``report.json`` manifest into
``--out``.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 estimation error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from tspr import __version__
from tspr.config import RunConfig, load_config
from tspr.errors import ConfigError, TsprError
from tspr.estimators import estimate_ybar0, iter_strata_rows, naive_with_se, tspr_with_se
from tspr import harness as h


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _r_min(text: str):
    if text.lower() == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--r-min takes a number or 'auto', got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tspr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with run settings")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--runs", type=int, help="Monte Carlo replications")
    common.add_argument("--p", type=float, help="treatment share of items")
    common.add_argument("--r-min", type=_r_min, help="relevance threshold, or 'auto' to tune")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes for replications")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ground-truth": "conversion with every item treated vs none",
        "pre-experiment": "modified ranker without treatment; reports ybar0",
        "tspr": "one prioritized-ranking experiment with bootstrap SE",
        "naive": "one item-side experiment with the naive estimator",
        "monte-carlo": "replicate both experiments and summarise",
        "sensitivity": "Monte Carlo estimates across relevance thresholds",
        "partial-curves": "mean partial outcomes by rank in four scenarios",
        "diagnose": "measured vs proportional partial treatment effects",
        "calibrate": "fit behaviour and hyperparameters to an impression log",
    }
    cmds = {name: sub.add_parser(name, parents=[common], help=text) for name, text in helps.items()}
    cmds["sensitivity"].add_argument("--grid", type=_floats, help="thresholds, e.g. '-2,-1,0,1,2'")
    cmds["diagnose"].add_argument("--l", dest="l_values", type=_ints, help="prefix lengths")
    cal = cmds["calibrate"]
    cal.add_argument("--impressions", help="impression CSV; omit to use a simulated log")
    cal.add_argument("--sigma-grid", type=_floats, default=(4.0, 8.0, 12.0))
    cal.add_argument("--nq-grid", type=_ints, default=(10, 25, 40))
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {"master_seed": args.seed, "runs": args.runs, "p": args.p,
                 "out_dir": args.out, "workers": args.workers}
    cfg = load_config(args.config, **overrides)
    if args.r_min == "auto":
        cfg = cfg.with_(r_min=None)
    elif args.r_min is not None:
        cfg = cfg.with_(r_min=args.r_min)
    return cfg


def _manifest(command: str, cfg: RunConfig, outputs: list[str], **results) -> dict:
    return {"command": command, "version": __version__, "config": cfg.to_dict(),
            "outputs": outputs, "results": results}


def cmd_ground_truth(cfg: RunConfig, args, out: Path) -> dict:
    gt = h.run_ground_truth(cfg)
    return _manifest("ground-truth", cfg, [], **asdict(gt))


def cmd_pre_experiment(cfg: RunConfig, args, out: Path) -> dict:
    r_min = h.resolve_r_min(cfg)
    s_market, s_pre, *_ = h.run_seed(cfg.master_seed, 0).spawn(5)
    pre = h.run_pre_experiment(cfg, h.draw_market(cfg, s_market), s_pre, r_min)
    pre.to_csv(out / "pre_experiment.csv")
    return _manifest("pre-experiment", cfg, ["pre_experiment.csv"], r_min=r_min,
                     ybar0=estimate_ybar0(pre), n_queries=len(pre),
                     mean_block_length=float(pre.l.mean()))


def cmd_tspr(cfg: RunConfig, args, out: Path) -> dict:
    r_min, delta = h.resolve_r_min(cfg), h.resolve_delta(cfg)
    s_market, s_pre, s_exp, _, s_boot = h.run_seed(cfg.master_seed, 0).spawn(5)
    market = h.draw_market(cfg, s_market)
    pre = h.run_pre_experiment(cfg, market, s_pre, r_min)
    rec = h.run_tspr_experiment(cfg, market, s_exp, r_min, delta)
    report = tspr_with_se(rec, estimate_ybar0(pre), max(cfg.n_boot, 2),
                          np.random.default_rng(s_boot), cfg.min_stratum,
                          pre if cfg.resample_pre else None)
    report.diagnostics["n_short_listings"] = rec.n_excluded
    rec.to_csv(out / "records.csv")
    h.write_csv(out / "strata.csv", iter_strata_rows(report))
    return _manifest("tspr", cfg, ["records.csv", "strata.csv"], r_min=r_min, delta=delta,
                     estimate=report.to_dict())


def cmd_naive(cfg: RunConfig, args, out: Path) -> dict:
    delta = h.resolve_delta(cfg)
    s_market, _, _, s_naive, s_boot = h.run_seed(cfg.master_seed, 0).spawn(5)
    rec = h.run_naive_experiment(cfg, h.draw_market(cfg, s_market), s_naive, delta)
    report = naive_with_se(rec, cfg.p, max(cfg.n_boot, 2), np.random.default_rng(s_boot))
    return _manifest("naive", cfg, [], delta=delta, estimate=report.to_dict())


def cmd_monte_carlo(cfg: RunConfig, args, out: Path) -> dict:
    summary = h.run_monte_carlo(cfg)
    outputs = h.write_monte_carlo(out, summary)
    return _manifest("monte-carlo", cfg, outputs, **summary.to_dict())


def cmd_sensitivity(cfg: RunConfig, args, out: Path) -> dict:
    grid = args.grid or cfg.r_grid
    res = h.run_sensitivity(cfg, grid)
    h.write_csv(out / "sensitivity.csv", res.rows())
    return _manifest("sensitivity", cfg, ["sensitivity.csv"], truth=res.truth,
                     spread=res.spread, pooled_se=res.pooled_se, se_trend=res.se_trend)


def cmd_partial_curves(cfg: RunConfig, args, out: Path) -> dict:
    rows = h.run_partial_outcome_curves(cfg)
    h.write_csv(out / "partial_curves.csv", rows)
    return _manifest("partial-curves", cfg, ["partial_curves.csv"],
                     r_min=h.resolve_r_min(cfg), delta=h.resolve_delta(cfg))


def cmd_diagnose(cfg: RunConfig, args, out: Path) -> dict:
    rows = h.diagnose_proportionality(cfg, args.l_values)
    h.write_csv(out / "proportionality.csv", rows)
    return _manifest("diagnose", cfg, ["proportionality.csv"], delta=h.resolve_delta(cfg))


def cmd_calibrate(cfg: RunConfig, args, out: Path) -> dict:
    res = h.run_calibration(cfg, args.impressions, args.sigma_grid, args.nq_grid)
    params = res.params()
    payload = {"params": params,
               "delta": None if res.delta is None else res.delta.delta,
               "target_drop": cfg.target_drop}
    h.write_json(out / "params.json", payload)
    h.write_csv(out / "calibration_loss.csv",
                ({"sigma": c.sigma, "nq_values": " ".join(map(str, c.nq.values)), "loss": loss}
                 for c, loss in res.hyper.surface))
    h.write_csv(out / "holdout_ctr.csv",
                ({"rank": k + 1, "observed": o, "simulated": s}
                 for k, (o, s) in enumerate(zip(res.holdout_ctr, res.simulated_ctr))))
    return _manifest(
        "calibrate", cfg, ["params.json", "calibration_loss.csv", "holdout_ctr.csv"],
        params=params, delta=payload["delta"], holdout_ctr_mae=res.holdout_mae,
        click_fit={"converged": res.click_fit.converged, "iterations": res.click_fit.iterations,
                   "gradient_norm": res.click_fit.gradient_norm, "flags": res.click_fit.flags},
        booking_fit={"converged": res.booking_fit.converged,
                     "gradient_norm": res.booking_fit.gradient_norm,
                     "flags": res.booking_fit.flags},
        rows=res.n_rows, skipped_rows=res.n_skipped, violations=res.n_violations,
    )


COMMANDS = {
    "ground-truth": cmd_ground_truth,
    "pre-experiment": cmd_pre_experiment,
    "tspr": cmd_tspr,
    "naive": cmd_naive,
    "monte-carlo": cmd_monte_carlo,
    "sensitivity": cmd_sensitivity,
    "partial-curves": cmd_partial_curves,
    "diagnose": cmd_diagnose,
    "calibrate": cmd_calibrate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        out = Path(cfg.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
        manifest = COMMANDS[args.command](cfg, args, out)
        h.write_json(out / "report.json", manifest)
    except TsprError as exc:
        print(f"tspr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    _print_summary(manifest)
    return 0


def _print_summary(manifest: dict) -> None:
    results = manifest["results"]
    for key, value in results.items():
        if isinstance(value, float):
            print(f"{key}: {value:.6g}" if math.isfinite(value) else f"{key}: nan")
        elif isinstance(value, (int, str)):
            print(f"{key}: {value}")
    if "estimate" in results:
        est = results["estimate"]
        print(f"{est['method']}: theta_hat={est['theta_hat']:.4f} se={est['se']:.4f}")
    for method, st in results.get("methods", {}).items():
        print(f"{method}: mean={st['mean']:.4f} std={st['std']:.4f} "
              f"mean_se={st['mean_se']:.4f} coverage={st['coverage']:.2f}")
    print(f"wrote {', '.join(manifest['outputs'] + ['report.json'])}")


if __name__ == "__main__":
    sys.exit(main())
