"""TATE estimators: the stratified prioritized-ranking estimator, the naive
item-side Horvitz-Thompson estimator, and bootstrap standard errors."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from tspr.errors import BootstrapError, DataError, EstimationError, SchemaError
from tspr.marketplace import Arm, Group


class DegenerateMarketWarning(UserWarning):
    pass


@dataclass
class TsprRecords:
    """One row per query: arm, block length ``l``, ``Y`` and ``Y^l``."""

    arm: np.ndarray
    l: np.ndarray
    y_total: np.ndarray
    y_partial: np.ndarray
    query_id: np.ndarray | None = None
    n_excluded: int = 0

    def __post_init__(self) -> None:
        self.arm = np.asarray(self.arm, dtype=np.int64)
        self.l = np.asarray(self.l, dtype=np.int64)
        self.y_total = np.asarray(self.y_total, dtype=float)
        self.y_partial = np.asarray(self.y_partial, dtype=float)
        if self.query_id is None:
            self.query_id = np.arange(len(self.l))
        self.query_id = np.asarray(self.query_id, dtype=np.int64)
        n = len(self.l)
        if not all(len(a) == n for a in (self.arm, self.y_total, self.y_partial)):
            raise DataError("record columns differ in length")
        if np.any(self.l < 0):
            raise DataError("block lengths must be non-negative")
        if np.any(self.y_partial > self.y_total + 1e-9):
            raise DataError("partial outcome exceeds total outcome")

    def __len__(self) -> int:
        return len(self.l)

    def take(self, idx) -> TsprRecords:
        return TsprRecords(
            self.arm[idx], self.l[idx], self.y_total[idx], self.y_partial[idx],
            self.query_id[idx], self.n_excluded,
        )

    def arm_subset(self, arm: Arm) -> TsprRecords:
        return self.take(np.flatnonzero(self.arm == arm))

    @classmethod
    def from_batch(cls, batch, min_listing: int = 1) -> TsprRecords:
        """Records for queries showing at least ``min_listing`` items.

        Shorter listings are left out; ``n_excluded`` counts them.
        """
        l = batch.block_lengths()
        keep = np.flatnonzero(batch.n_displayed >= min_listing)
        rec = cls(batch.arm[keep], l[keep], batch.y_total[keep], batch.partial(l)[keep], keep)
        rec.n_excluded = batch.n_queries - len(keep)
        return rec

    @classmethod
    def concat(cls, parts: Sequence[TsprRecords]) -> TsprRecords:
        return cls(
            np.concatenate([r.arm for r in parts]),
            np.concatenate([r.l for r in parts]),
            np.concatenate([r.y_total for r in parts]),
            np.concatenate([r.y_partial for r in parts]),
            np.concatenate([r.query_id for r in parts]),
        )

    def scaled(self, c: float) -> TsprRecords:
        return TsprRecords(self.arm, self.l, c * self.y_total, c * self.y_partial, self.query_id)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "arm", "l", "Y_total", "Y_partial"])
            for row in zip(self.query_id, self.arm, self.l, self.y_total, self.y_partial):
                w.writerow([int(row[0]), Arm(row[1]).name, int(row[2]), repr(float(row[3])), repr(float(row[4]))])

    @classmethod
    def from_csv(cls, path) -> TsprRecords:
        cols: dict[str, list] = {k: [] for k in ("query_id", "arm", "l", "Y_total", "Y_partial")}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(cols) - set(reader.fieldnames or [])
            if missing:
                raise SchemaError(f"record file lacks columns {sorted(missing)}")
            for row in reader:
                for k in cols:
                    cols[k].append(row[k])
        if not cols["l"]:
            raise DataError(f"{path}: no records")
        arm = [Arm[a] if not a.isdigit() else Arm(int(a)) for a in cols["arm"]]
        return cls(
            np.array(arm), np.array(cols["l"], dtype=np.int64),
            np.array(cols["Y_total"], dtype=float), np.array(cols["Y_partial"], dtype=float),
            np.array(cols["query_id"], dtype=np.int64),
        )


@dataclass
class NaiveRecords:
    """Per-query outcome totals split by item treatment status."""

    y_treated: np.ndarray
    y_control: np.ndarray
    query_id: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.y_treated = np.asarray(self.y_treated, dtype=float)
        self.y_control = np.asarray(self.y_control, dtype=float)
        if self.query_id is None:
            self.query_id = np.arange(len(self.y_treated))
        self.query_id = np.asarray(self.query_id, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y_treated)

    def take(self, idx) -> NaiveRecords:
        return NaiveRecords(self.y_treated[idx], self.y_control[idx], self.query_id[idx])

    @classmethod
    def from_batch(cls, batch) -> NaiveRecords:
        treated = (batch.group == Group.TREATED) & batch.displayed
        y = batch.y * batch.displayed
        return cls((y * treated).sum(axis=1), (y * ~treated).sum(axis=1))

    @classmethod
    def from_items(cls, query_id, treated, y, n_queries: int | None = None) -> NaiveRecords:
        """Aggregate long-format item outcomes ``(query_id, treated, y)``.

        Query ids must be ``0..n_queries-1``; queries with no rows count as
        zero-outcome queries.
        """
        query_id = np.asarray(query_id, dtype=np.int64)
        treated = np.asarray(treated, dtype=bool)
        y = np.asarray(y, dtype=float)
        n = int(query_id.max()) + 1 if n_queries is None else n_queries
        yt = np.bincount(query_id, weights=y * treated, minlength=n)
        yc = np.bincount(query_id, weights=y * ~treated, minlength=n)
        return cls(yt, yc)

    def scaled(self, c: float) -> NaiveRecords:
        return NaiveRecords(c * self.y_treated, c * self.y_control, self.query_id)


def write_item_outcomes(batch, path) -> None:
    """Long-format per-item outcomes (displayed items only)."""
    rows, cols = np.nonzero(batch.displayed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "item_id", "position", "group", "y"])
        for q, k in zip(rows, cols):
            w.writerow([int(q), int(batch.item_id[q, k]), int(k) + 1,
                        Group(int(batch.group[q, k])).name, repr(float(batch.y[q, k]))])


def read_item_outcomes(path) -> NaiveRecords:
    qid, treated, y = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"query_id", "group", "y"} - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"item outcome file lacks columns {sorted(missing)}")
        for row in reader:
            qid.append(int(row["query_id"]))
            treated.append(row["group"] == Group.TREATED.name)
            y.append(float(row["y"]))
    if not qid:
        raise DataError(f"{path}: no item rows")
    return NaiveRecords.from_items(qid, treated, y)


@dataclass
class StratumStats:
    l: int
    n_A: int
    n_B: int
    mean_YA: float
    mean_YB: float
    weight: float = 0.0
    raw_weight: float = 0.0
    term: float = 0.0


@dataclass
class EstimateReport:
    theta_hat: float
    se: float = float("nan")
    method: str = "tspr"
    ybar0: float = float("nan")
    strata: list[StratumStats] = field(default_factory=list)
    n_dropped_strata: int = 0
    diagnostics: dict = field(default_factory=dict)

    def ci95(self) -> tuple[float, float]:
        return (self.theta_hat - 1.96 * self.se, self.theta_hat + 1.96 * self.se)

    def covers(self, value: float) -> bool:
        lo, hi = self.ci95()
        return lo <= value <= hi

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=_json_default)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> EstimateReport:
        d = dict(d)
        d["strata"] = [StratumStats(**s) for s in d.get("strata", [])]
        return cls(**d)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def partial_outcome(y: Sequence[float], l: int) -> float:
    """Sum of the first ``l`` entry outcomes."""
    if l < 0 or l > len(y):
        raise ValueError(f"prefix length {l} outside listing of length {len(y)}")
    return float(sum(y[:l]))


def estimate_ybar0(records) -> float:
    y = np.asarray(getattr(records, "y_total", records), dtype=float)
    if y.size == 0:
        raise EstimationError("no pre-experiment records")
    return float(y.mean())


def _strata_arrays(lA, yA, lB, yB, min_stratum):
    size = int(max(lA.max(initial=0), lB.max(initial=0))) + 1
    nA = np.bincount(lA, minlength=size)
    nB = np.bincount(lB, minlength=size)
    sA = np.bincount(lA, weights=yA, minlength=size)
    sB = np.bincount(lB, weights=yB, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        mA = sA / nA
        mB = sB / nB
    present = (np.arange(size) >= 1) & (nA > 0) & (nB > 0)
    keep = present & (nA >= min_stratum) & (nB >= min_stratum) & (mA > 0)
    return nA, nB, mA, mB, present, keep


def tspr_theta(records_A: TsprRecords, records_B: TsprRecords, ybar0: float,
               min_stratum: int = 1) -> float:
    """Point estimate only; the fast path used inside the bootstrap."""
    if ybar0 == 0:
        return 0.0
    nA, nB, mA, mB, _, keep = _strata_arrays(
        records_A.l, records_A.y_partial, records_B.l, records_B.y_partial, min_stratum
    )
    if not keep.any():
        raise EstimationError("no stratum is populated in both arms")
    counts = (nA + nB)[keep]
    rel = (mB[keep] - mA[keep]) / mA[keep]
    return float(ybar0 * np.dot(counts, rel) / counts.sum())


def estimate_tspr(
    records_A: TsprRecords,
    records_B: TsprRecords,
    ybar0: float,
    min_stratum: int = 1,
) -> EstimateReport:
    """Frequency-weighted estimate over block-length strata.

    Each retained stratum ``l`` contributes
    ``ybar0 * (mean Y^l in B - mean Y^l in A) / mean Y^l in A`` weighted by
    its share of queries.  Strata missing from an arm, below
    ``min_stratum`` queries in an arm, or with a zero arm-A mean are
    dropped and the weights renormalised over the rest.
    """
    if ybar0 < 0:
        raise EstimationError("ybar0 must be non-negative")
    n_total = len(records_A) + len(records_B)
    if n_total == 0:
        raise EstimationError("no experiment records")
    nA, nB, mA, mB, present, keep = _strata_arrays(
        records_A.l, records_A.y_partial, records_B.l, records_B.y_partial, min_stratum
    )
    diagnostics = {
        "n_A": len(records_A),
        "n_B": len(records_B),
        "n_l0_A": int(nA[0]) if len(nA) else 0,
        "n_l0_B": int(nB[0]) if len(nB) else 0,
    }
    if ybar0 == 0:
        warnings.warn("pre-experiment mean outcome is zero; estimate set to 0",
                      DegenerateMarketWarning, stacklevel=2)
        diagnostics["degenerate"] = True
        return EstimateReport(0.0, method="tspr", ybar0=0.0, diagnostics=diagnostics)
    if not keep.any():
        raise EstimationError("no stratum is populated in both arms")

    counts = (nA + nB).astype(float)
    kept_mass = counts[keep].sum()
    strata = []
    for l in np.flatnonzero(keep):
        w = counts[l] / kept_mass
        rel = (mB[l] - mA[l]) / mA[l]
        strata.append(StratumStats(
            l=int(l), n_A=int(nA[l]), n_B=int(nB[l]),
            mean_YA=float(mA[l]), mean_YB=float(mB[l]),
            weight=float(w), raw_weight=float(counts[l] / n_total),
            term=float(ybar0 * rel),
        ))
    theta = math.fsum(s.weight * s.term for s in strata)
    candidate = np.arange(len(counts)) >= 1
    diagnostics.update(
        dropped_mass=float(counts[candidate & ~keep].sum() / n_total),
        l0_mass=float(counts[0] / n_total) if len(counts) else 0.0,
        n_strata_one_arm=int((candidate & (counts > 0) & ~present).sum()),
        n_strata_zero_mean=int((present & ~keep).sum()),
        L=int(max(s.l for s in strata)),
    )
    n_dropped = int((candidate & (counts > 0) & ~keep).sum())
    return EstimateReport(theta, method="tspr", ybar0=float(ybar0), strata=strata,
                          n_dropped_strata=n_dropped, diagnostics=diagnostics)


def naive_theta(records: NaiveRecords, p: float) -> float:
    if not 0.0 < p < 1.0:
        raise EstimationError(f"inclusion probability must lie in (0, 1), got {p}")
    n = len(records)
    if n == 0:
        raise EstimationError("no query records")
    return float(records.y_treated.sum() / (p * n) - records.y_control.sum() / ((1 - p) * n))


def estimate_naive_is(records: NaiveRecords, p: float) -> EstimateReport:
    """Inverse-probability-weighted difference of treated and control totals."""
    theta = naive_theta(records, p)
    return EstimateReport(
        theta, method="naive_is",
        diagnostics={
            "n_queries": len(records),
            "treated_total": float(records.y_treated.sum()),
            "control_total": float(records.y_control.sum()),
            "p": p,
        },
    )


def bootstrap_replicates(
    samples: Sequence,
    estimator: Callable[..., float],
    n_boot: int = 200,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Estimator values over resamples drawn independently within each sample.

    Failed replicates come back as NaN.  More than half failing raises
    :class:`BootstrapError`.
    """
    if n_boot < 2:
        raise ValueError("need at least two bootstrap replicates")
    rng = np.random.default_rng(rng)
    out = np.full(n_boot, np.nan)
    for b in range(n_boot):
        resampled = [s.take(rng.integers(0, len(s), len(s))) for s in samples]
        try:
            out[b] = estimator(*resampled)
        except EstimationError:
            pass
    failed = int(np.isnan(out).sum())
    if failed > n_boot / 2:
        raise BootstrapError(f"{failed} of {n_boot} bootstrap replicates failed")
    return out


def bootstrap_se(
    samples: Sequence,
    estimator: Callable[..., float],
    n_boot: int = 200,
    rng: np.random.Generator | int | None = None,
) -> float:
    reps = bootstrap_replicates(samples, estimator, n_boot, rng)
    return float(np.nanstd(reps, ddof=1))


def tspr_with_se(
    records: TsprRecords,
    ybar0: float,
    n_boot: int = 200,
    rng=None,
    min_stratum: int = 1,
    pre_records: TsprRecords | None = None,
) -> EstimateReport:
    """Estimate plus bootstrap SE, resampling arm A and arm B separately.

    With ``pre_records`` the pre-experiment sample is resampled too and
    ``ybar0`` is recomputed per replicate; otherwise it stays fixed.
    """
    rec_A, rec_B = records.arm_subset(Arm.A), records.arm_subset(Arm.B)
    report = estimate_tspr(rec_A, rec_B, ybar0, min_stratum)
    if report.diagnostics.get("degenerate"):
        report.se = 0.0
        return report
    if pre_records is None:
        se = bootstrap_se(
            [rec_A, rec_B], lambda a, b: tspr_theta(a, b, ybar0, min_stratum), n_boot, rng
        )
    else:
        se = bootstrap_se(
            [rec_A, rec_B, pre_records],
            lambda a, b, pre: tspr_theta(a, b, estimate_ybar0(pre), min_stratum),
            n_boot, rng,
        )
    report.se = se
    return report


def naive_with_se(records: NaiveRecords, p: float, n_boot: int = 200, rng=None) -> EstimateReport:
    report = estimate_naive_is(records, p)
    report.se = bootstrap_se([records], lambda r: naive_theta(r, p), n_boot, rng)
    return report


def iter_strata_rows(report: EstimateReport, **extra) -> Iterable[dict]:
    for s in report.strata:
        yield {**extra, **asdict(s)}
