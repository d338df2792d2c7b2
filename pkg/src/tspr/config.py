"""Run configuration: one flat dataclass, loadable from an INI file.

Sections in the file are only for readability; every key maps to a
:class:`RunConfig` field and a key may sit in any section.  Example::

    [run]
    master_seed = 7
    runs = 100

    [market]
    n_items = 2000000
    sigma = 8.0
    nq_values = 20, 25, 30
    nq_probs = 0.25, 0.5, 0.25

    [design]
    p = 0.25
    r_min = auto

``r_min = auto`` (the default) selects the threshold with
:func:`tspr.harness.tune_r_min`.  Leaving ``delta`` unset calibrates it to
``target_drop`` with :func:`tspr.calibration.calibrate_delta`.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from tspr.behavior import (
    BOOKING_MODES,
    OUTCOME_KINDS,
    SCAN_DIRECTIONS,
    BookingParams,
    ClickParams,
    TreatmentSpec,
)
from tspr.design import check_treatment_share
from tspr.errors import ConfigError
from tspr.marketplace import NqSpec, UtilityDist
from tspr.simulate import RANKERS, BehaviorModel


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 2024
    # market
    n_items: int = 2_000_000
    n_queries: int = 20_000
    pre_queries: int | None = None  # None: same as n_queries
    sigma: float = 8.0
    nq_values: tuple[int, ...] = (25,)
    nq_probs: tuple[float, ...] | None = None
    utility_kind: str = "normal"
    utility_loc: float = 1.0
    utility_scale: float = 1.0
    # design
    p: float = 0.25
    r_min: float | None = None  # None: tuned
    arm_prob: float = 0.5
    # behaviour
    b0: float = 1.5
    b_rank: float = -1.0
    b_rank2: float = -0.25
    b_v: float = 1.0
    b_prior: float = 0.0
    g_v: float = 1.0
    outside_utility: float = 0.0
    booking_mode: str = "logit"
    scan: str = "top_down"
    outcome_kind: str = "booking"
    params_file: str | None = None
    # treatment
    delta: float | None = None  # None: calibrated to target_drop
    target_drop: float = 0.05
    affects_clicks: bool = True
    delta_bracket: tuple[float, float] = (0.0, 3.0)
    delta_tol: float = 1e-4
    # estimation
    n_boot: int = 200
    runs: int = 100
    min_stratum: int = 1
    min_listing: int = 1
    resample_pre: bool = False
    workers: int = 1
    # threshold tuning and diagnostics
    r_grid: tuple[float, ...] = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    tune_tol: float = 0.015
    tune_queries: int = 50_000
    curve_runs: int = 5
    diagnose_ranker: str = "original"
    diagnose_l: tuple[int, ...] = (0, 1, 2, 3, 5, 10, 25)
    # calibration
    holdout_share: float = 0.2
    random_share: float = 1 / 3
    out_dir: str = "out"

    def __post_init__(self) -> None:
        if self.params_file is not None and not Path(self.params_file).is_file():
            raise ConfigError(f"params_file {self.params_file} does not exist")
        check_treatment_share(self.p)
        if not 0.0 < self.arm_prob < 1.0:
            raise ConfigError(f"arm_prob must lie in (0, 1), got {self.arm_prob}")
        for name in ("n_items", "n_queries", "runs", "tune_queries", "curve_runs", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.pre_queries is not None and self.pre_queries < 1:
            raise ConfigError("pre_queries must be >= 1")
        if self.n_boot < 0 or self.n_boot == 1:
            raise ConfigError("n_boot must be 0 (no bootstrap) or >= 2")
        if self.min_stratum < 1 or self.min_listing < 1:
            raise ConfigError("min_stratum and min_listing must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if max(self.nq_values) > self.n_items:
            raise ConfigError("n_q exceeds the item pool")
        if self.r_min is not None and math.isnan(self.r_min):
            raise ConfigError("r_min must not be NaN")
        if self.delta is not None and self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if not self.target_drop >= 0:
            raise ConfigError("target_drop must be >= 0")
        lo, hi = self.delta_bracket
        if not 0 <= lo < hi:
            raise ConfigError("delta_bracket must satisfy 0 <= low < high")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ConfigError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if self.booking_mode not in BOOKING_MODES:
            raise ConfigError(f"booking_mode must be one of {BOOKING_MODES}")
        if self.scan not in SCAN_DIRECTIONS:
            raise ConfigError(f"scan must be one of {SCAN_DIRECTIONS}")
        if self.diagnose_ranker not in RANKERS:
            raise ConfigError(f"diagnose_ranker must be one of {RANKERS}")
        if not self.r_grid:
            raise ConfigError("r_grid must not be empty")
        if not 0.0 < self.holdout_share < 1.0 or not 0.0 <= self.random_share <= 1.0:
            raise ConfigError("holdout_share must lie in (0, 1), random_share in [0, 1]")
        self.nq  # validates the n_q distribution
        self.utility

    # derived objects

    @property
    def nq(self) -> NqSpec:
        return NqSpec(tuple(self.nq_values), self.nq_probs)

    @property
    def utility(self) -> UtilityDist:
        return UtilityDist(self.utility_kind, self.utility_loc, self.utility_scale)

    @property
    def click(self) -> ClickParams:
        return ClickParams(self.b0, self.b_rank, self.b_rank2, self.b_v, self.b_prior)

    @property
    def booking(self) -> BookingParams:
        return BookingParams(self.g_v, self.outside_utility, self.booking_mode)

    @property
    def model(self) -> BehaviorModel:
        return BehaviorModel(self.click, self.booking, self.outcome_kind, self.scan)

    @property
    def n_pre(self) -> int:
        return self.n_queries if self.pre_queries is None else self.pre_queries

    def treatment(self, delta: float) -> TreatmentSpec:
        return TreatmentSpec(delta, self.affects_clicks)

    def with_(self, **changes) -> RunConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def read_params_file(path) -> dict:
    """Behaviour coefficients (and optionally sigma, n_q) from a JSON file.

    Accepts either a flat mapping or one nested under ``"params"``, as
    written by ``tspr calibrate``.  Unknown keys are ignored.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"params_file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"params_file {path} is not valid JSON: {exc}") from exc
    out = {}
    for key, value in data.get("params", data).items():
        if key in ("b0", "b_rank", "b_rank2", "b_v", "b_prior", "g_v", "outside_utility", "sigma"):
            out[key] = float(value)
        elif key == "nq_values":
            out[key] = tuple(int(v) for v in value)
    return out


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    default = _FIELDS[name].default
    text = raw.strip()
    optional = name in ("r_min", "delta", "pre_queries", "params_file", "nq_probs")
    if optional and text.lower() in ("", "none", "auto"):
        return None
    try:
        if name in ("nq_values", "diagnose_l"):
            return tuple(int(v) for v in text.replace(",", " ").split())
        if name in ("nq_probs", "r_grid", "delta_bracket"):
            return tuple(float(v) for v in text.replace(",", " ").split())
        if name in ("params_file", "out_dir", "utility_kind", "booking_mode", "scan",
                    "outcome_kind", "diagnose_ranker"):
            return text
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int) or name == "pre_queries":
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from exc


def load_config(path=None, **overrides) -> RunConfig:
    """Read an INI file (optional) and apply keyword overrides on top."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in _FIELDS:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                values[key] = _parse_value(key, raw)
        if values.get("params_file") and not Path(values["params_file"]).is_absolute():
            values["params_file"] = str(path.parent / values["params_file"])
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    if values.get("params_file"):
        # inline keys win over the file
        for key, value in read_params_file(values["params_file"]).items():
            values.setdefault(key, value)
    return RunConfig(**values)
