"""Scenario configuration, synthetic profiles and JSON ingestion."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .comm import Delay, FaultModel, LinkFailure, PacketLoss, resolve_categories
from .der import DerUnit, FleetCosts, build_fleet, fleet_from_json, fleet_to_json
from .network import FeederModel, build_synthetic_feeder, feeder_from_json

# Pre- and post-disturbance per-phase feeder-head setpoints of the reference
# case, MW.
REFERENCE_VPP_BEFORE = (0.97, 0.93, 0.95)
REFERENCE_VPP_AFTER = (1.17, 0.70, 0.61)

# Late-morning shapes over a two-hour window: (time s, value).
DEFAULT_PV_KNOTS = ((0.0, 0.70), (3600.0, 0.76), (7200.0, 0.80))
DEFAULT_LOAD_KNOTS = ((0.0, 0.98), (3600.0, 1.0), (7200.0, 1.01))

# Loop and system defaults tuned so the fault-free reference case settles.
DEFAULT_IMPEDANCE_SCALE = 0.004
DEFAULT_VPP_SCALE = 0.2
DEFAULT_BATTERY_C_RATE = 1.0
DEFAULT_BETA = 0.375
DEFAULT_ALPHA = 1.0
DEFAULT_DUAL_DECAY = 0.2


class ConfigError(ValueError):
    """Invalid scenario or campaign document; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class FaultSpec:
    category: str
    model: str
    subcategory: str | None = None
    p_drop: float = 0.0
    p_fail: float = 0.0
    downtime_s: float = 0.0
    latency_s: float = 0.0
    channel_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        resolve_categories(self.category, self.subcategory)
        self.fault_model()
        if not 0.0 <= self.channel_fraction <= 1.0:
            raise ValueError("channel_fraction must lie in [0, 1]")

    def fault_model(self) -> FaultModel:
        if self.model == "packet_loss":
            return PacketLoss(self.p_drop)
        if self.model == "link_failure":
            return LinkFailure(self.p_fail, self.downtime_s)
        if self.model == "delay":
            return Delay(self.latency_s)
        raise ValueError(f"unknown fault model {self.model!r}")

    @property
    def is_random(self) -> bool:
        if self.model == "packet_loss":
            return 0.0 < self.p_drop < 1.0
        if self.model == "link_failure":
            return 0.0 < self.p_fail < 1.0 and self.downtime_s > 0
        return False

    def to_json(self) -> dict:
        doc = {"category": self.category, "model": self.model}
        if self.subcategory is not None:
            doc["subcategory"] = self.subcategory
        if self.model == "packet_loss":
            doc["p_drop"] = self.p_drop
        elif self.model == "link_failure":
            doc["p_fail"] = self.p_fail
            doc["downtime_s"] = self.downtime_s
        else:
            doc["latency_s"] = self.latency_s
        doc["channel_fraction"] = self.channel_fraction
        doc["seed"] = self.seed
        return doc


@dataclass(frozen=True)
class MetricSpec:
    duration_s: float = 2400.0
    tol_v: float = 0.002
    tol_p_mw: float = 0.02
    window_s: float = 60.0


@dataclass(frozen=True)
class LoadProfile:
    """Per-phase per-node demand sampled every ``sample_period`` seconds.

    ``p`` and ``q`` have shape (samples, 3, n); values between samples are
    linearly interpolated.
    """

    p: np.ndarray
    q: np.ndarray
    sample_period: float

    def __post_init__(self):
        if np.any(self.p < 0):
            raise ValueError("real demand must be nonnegative")
        if self.p.shape != self.q.shape:
            raise ValueError("p and q profiles differ in shape")

    @property
    def duration(self) -> float:
        return (self.p.shape[0] - 1) * self.sample_period

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        x = t / self.sample_period
        i = min(int(x), self.p.shape[0] - 2)
        w = x - i
        if w == 0.0:
            return self.p[i], self.q[i]
        return (1 - w) * self.p[i] + w * self.p[i + 1], (1 - w) * self.q[i] + w * self.q[i + 1]


def knot_series(knots, times) -> np.ndarray:
    ts, vs = zip(*knots)
    return np.interp(times, ts, vs)


def build_load_profile(feeder: FeederModel, horizon: float, knots=DEFAULT_LOAD_KNOTS, sample_period: float = 900.0):
    """Nominal feeder load scaled by a smooth multiplier, 15-minute samples."""
    n_samples = int(np.ceil(horizon / sample_period)) + 1
    mult = knot_series(knots, np.arange(n_samples) * sample_period)
    p = mult[:, None, None] * feeder.p_load_nom[None]
    q = mult[:, None, None] * feeder.q_load_nom[None]
    return LoadProfile(p, q, sample_period)


@dataclass(frozen=True)
class PvProfile:
    """Available PV power as a common fraction of rating, 1-minute samples."""

    fraction: np.ndarray
    sample_period: float = 60.0

    def at(self, t: float) -> float:
        x = t / self.sample_period
        i = min(int(x), len(self.fraction) - 2)
        w = x - i
        return float((1 - w) * self.fraction[i] + w * self.fraction[i + 1])


def build_pv_profile(horizon: float, knots=DEFAULT_PV_KNOTS, sample_period: float = 60.0) -> PvProfile:
    n_samples = int(np.ceil(horizon / sample_period)) + 1
    return PvProfile(knot_series(knots, np.arange(n_samples) * sample_period), sample_period)


def desk_system(
    node_count: int = 96,
    pv_count: int = 24,
    battery_fraction: float = 0.5,
    seed: int = 1,
    *,
    impedance_scale: float = DEFAULT_IMPEDANCE_SCALE,
    vpp_scale: float = DEFAULT_VPP_SCALE,
    reference_time: float = 3600.0,
    pv_knots=DEFAULT_PV_KNOTS,
    load_knots=DEFAULT_LOAD_KNOTS,
    power_factor: float = 0.95,
    costs: FleetCosts = FleetCosts(),
    battery_c_rate: float = DEFAULT_BATTERY_C_RATE,
    s_base: float = 1.0,
    v_source: float = 1.0,
) -> tuple[FeederModel, list[DerUnit]]:
    """Synthetic feeder, fleet and nominal load sized to the reference setpoints.

    Per-phase load at ``reference_time`` equals ``vpp_scale`` times the
    reference pre-disturbance setpoint plus the PV power available on that
    phase, so the uncontrolled feeder-head power sits on the setpoint just
    before the disturbance. Load is spread over nodes 1..n-1 with random
    weights.
    """
    feeder = build_synthetic_feeder(node_count, seed, impedance_scale, s_base=s_base, v_source=v_source)
    fleet = build_fleet(feeder, pv_count, battery_fraction, seed, costs=costs, battery_c_rate=battery_c_rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10AD]))
    pv_frac = float(knot_series(pv_knots, [reference_time])[0])
    load_mult = float(knot_series(load_knots, [reference_time])[0])
    p_nom = np.zeros((3, node_count))
    for ph in range(3):
        pv_kw = sum(u.s_rating for u in fleet if u.kind == "pv" and u.phase == ph)
        total_mw = (vpp_scale * REFERENCE_VPP_BEFORE[ph] + pv_frac * pv_kw / 1000.0) / load_mult
        w = rng.uniform(0.5, 1.5, size=node_count - 1)
        p_nom[ph, 1:] = total_mw * w / w.sum()
    q_nom = p_nom * np.tan(np.arccos(power_factor))
    return feeder.with_nominal_load(p_nom, q_nom), fleet


@dataclass(frozen=True)
class Scenario:
    feeder: FeederModel
    fleet: tuple[DerUnit, ...]
    vpp_before: tuple[float, float, float]
    vpp_after: tuple[float, float, float]
    horizon: float = 7200.0
    dt_grid: float = 2.0
    coordinator_period: float = 60.0
    measurement_period: float = 60.0
    der_period: float = 10.0
    v_min: float = 0.95
    v_max: float = 1.03
    vpp_halfwidth: float = 0.01
    disturbance_time: float = 3600.0
    faults: tuple[FaultSpec, ...] = ()
    master_seed: int = 0
    alpha: float = DEFAULT_ALPHA
    alpha_v: float | None = None
    beta: float = DEFAULT_BETA
    dual_decay: float = DEFAULT_DUAL_DECAY
    pv_knots: tuple = DEFAULT_PV_KNOTS
    load_knots: tuple = DEFAULT_LOAD_KNOTS
    metric: MetricSpec = MetricSpec()
    source: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        periods = {
            "dt_grid_s": self.dt_grid,
            "coordinator_period_s": self.coordinator_period,
            "measurement_period_s": self.measurement_period,
            "der_period_s": self.der_period,
        }
        for name, val in periods.items():
            if val <= 0:
                raise ConfigError("must be positive", name)
            steps = val / self.dt_grid
            if abs(steps - round(steps)) > 1e-9:
                raise ConfigError("must be a multiple of dt_grid", name)
        if self.horizon <= 0:
            raise ConfigError("must be positive", "horizon_s")
        if not 0 <= self.disturbance_time <= self.horizon:
            raise ConfigError("must lie within the horizon", "disturbance.time_s")
        if not self.v_min < self.v_max:
            raise ConfigError("v_min must be below v_max", "bounds")
        if self.vpp_halfwidth <= 0:
            raise ConfigError("must be positive", "bounds.vpp_halfwidth_mw")
        if self.alpha <= 0:
            raise ConfigError("must be positive", "alpha")
        if self.beta <= 0:
            raise ConfigError("must be positive", "beta")
        ids = [u.id for u in self.fleet]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate DER ids", "fleet")
        for u in self.fleet:
            if not 0 < u.node < self.feeder.node_count:
                raise ConfigError(f"DER {u.id} sits on node {u.node} outside the feeder", "fleet")

    def with_faults(self, *faults: FaultSpec) -> Scenario:
        return replace(self, faults=tuple(faults))

    def resolved(self) -> dict:
        """JSON-able description of every setting, for provenance headers."""
        doc = copy.deepcopy(self.source)
        doc.update(
            {
                "horizon_s": self.horizon,
                "dt_grid_s": self.dt_grid,
                "coordinator_period_s": self.coordinator_period,
                "measurement_period_s": self.measurement_period,
                "der_period_s": self.der_period,
                "bounds": {"v_min": self.v_min, "v_max": self.v_max, "vpp_halfwidth_mw": self.vpp_halfwidth},
                "disturbance": {
                    "time_s": self.disturbance_time,
                    "before_mw": list(self.vpp_before),
                    "after_mw": list(self.vpp_after),
                },
                "faults": [f.to_json() for f in self.faults],
                "master_seed": self.master_seed,
                "alpha": self.alpha,
                "alpha_v": self.alpha_v,
                "beta": self.beta,
                "dual_decay": self.dual_decay,
                "metric": {
                    "duration_s": self.metric.duration_s,
                    "tol_v": self.metric.tol_v,
                    "tol_p_mw": self.metric.tol_p_mw,
                    "window_s": self.metric.window_s,
                },
            }
        )
        return doc


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_TRIPLE = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_KNOTS = {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}, "minItems": 2}

FAULT_SCHEMA = {
    "type": "object",
    "required": ["category", "model"],
    "additionalProperties": False,
    "properties": {
        "category": {"type": "string"},
        "subcategory": {"type": "string"},
        "model": {"enum": ["packet_loss", "link_failure", "delay"]},
        "p_drop": _PROB,
        "p_fail": _PROB,
        "downtime_s": _NONNEG,
        "latency_s": _NONNEG,
        "channel_fraction": _PROB,
        "seed": {"type": "integer", "minimum": 0},
    },
}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "feeder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "node_count": {"type": "integer", "minimum": 2},
                        "seed": {"type": "integer", "minimum": 0},
                        "impedance_scale": _POS,
                        "s_base_mw": _POS,
                        "v_source_pu": _POS,
                        "vpp_scale": _POS,
                    },
                },
            },
        },
        "fleet": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "pv_count": {"type": "integer", "minimum": 0},
                        "battery_fraction": _PROB,
                        "battery_c_rate": _POS,
                        "cost_pv": _NONNEG,
                        "cost_q": _NONNEG,
                        "cost_soc": _NONNEG,
                    },
                },
            },
        },
        "profiles": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"pv_knots": _KNOTS, "load_knots": _KNOTS},
        },
        "horizon_s": _POS,
        "dt_grid_s": _POS,
        "coordinator_period_s": _POS,
        "measurement_period_s": _POS,
        "der_period_s": _POS,
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"v_min": _POS, "v_max": _POS, "vpp_halfwidth_mw": _POS},
        },
        "disturbance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"time_s": _NONNEG, "before_mw": _TRIPLE, "after_mw": _TRIPLE},
        },
        "faults": {"type": "array", "items": FAULT_SCHEMA},
        "master_seed": {"type": "integer", "minimum": 0},
        "alpha": _POS,
        "alpha_v": {"anyOf": [_POS, {"type": "null"}]},
        "beta": _POS,
        "dual_decay": _NONNEG,
        "metric": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"duration_s": _POS, "tol_v": _NONNEG, "tol_p_mw": _NONNEG, "window_s": _POS},
        },
    },
}


def _field_path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (("." if parts else "") + str(p)))
    return "".join(parts) or "<root>"


def validate(doc: Any, schema: dict) -> None:
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _field_path(err))


def scenario_from_json(doc: dict, base_dir: Path | None = None) -> Scenario:
    """Build a Scenario; missing blocks fall back to the desk-scale defaults."""
    validate(doc, SCENARIO_SCHEMA)
    base_dir = base_dir or Path(".")
    profiles = doc.get("profiles", {})
    pv_knots = tuple(tuple(k) for k in profiles.get("pv_knots", DEFAULT_PV_KNOTS))
    load_knots = tuple(tuple(k) for k in profiles.get("load_knots", DEFAULT_LOAD_KNOTS))
    dist = doc.get("disturbance", {})
    t_dist = float(dist.get("time_s", 3600.0))

    feeder_doc = doc.get("feeder", {})
    fleet_doc = doc.get("fleet", {})
    syn_feeder = feeder_doc.get("synthetic", {})
    syn_fleet = fleet_doc.get("synthetic", {})
    vpp_scale = float(syn_feeder.get("vpp_scale", DEFAULT_VPP_SCALE))

    if "path" in feeder_doc:
        fpath = _resolve(base_dir, feeder_doc["path"])
        try:
            feeder = feeder_from_json(json.loads(fpath.read_text()), base_dir=fpath.parent)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "feeder.path") from exc
        if "path" not in fleet_doc:
            raise ConfigError("a feeder file needs a fleet file", "fleet.path")
        fleet = _load_fleet(base_dir, fleet_doc["path"])
    else:
        costs = FleetCosts(
            pv_p=float(syn_fleet.get("cost_pv", FleetCosts.pv_p)),
            q=float(syn_fleet.get("cost_q", FleetCosts.q)),
            soc=float(syn_fleet.get("cost_soc", FleetCosts.soc)),
        )
        try:
            feeder, fleet = desk_system(
                node_count=int(syn_feeder.get("node_count", 96)),
                pv_count=int(syn_fleet.get("pv_count", 24)),
                battery_fraction=float(syn_fleet.get("battery_fraction", 0.5)),
                seed=int(syn_feeder.get("seed", 1)),
                impedance_scale=float(syn_feeder.get("impedance_scale", DEFAULT_IMPEDANCE_SCALE)),
                vpp_scale=vpp_scale,
                reference_time=t_dist,
                pv_knots=pv_knots,
                load_knots=load_knots,
                costs=costs,
                battery_c_rate=float(syn_fleet.get("battery_c_rate", DEFAULT_BATTERY_C_RATE)),
                s_base=float(syn_feeder.get("s_base_mw", 1.0)),
                v_source=float(syn_feeder.get("v_source_pu", 1.0)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc), "feeder.synthetic") from exc
        if "path" in fleet_doc:
            fleet = _load_fleet(base_dir, fleet_doc["path"])

    before = tuple(float(v) for v in dist.get("before_mw", [vpp_scale * v for v in REFERENCE_VPP_BEFORE]))
    after = tuple(float(v) for v in dist.get("after_mw", [vpp_scale * v for v in REFERENCE_VPP_AFTER]))

    faults = []
    for i, f in enumerate(doc.get("faults", [])):
        try:
            faults.append(FaultSpec(**f))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), f"faults[{i}]") from exc

    bounds = doc.get("bounds", {})
    metric = doc.get("metric", {})
    source = {k: copy.deepcopy(doc[k]) for k in ("feeder", "fleet", "profiles") if k in doc}
    try:
        return Scenario(
            feeder=feeder,
            fleet=tuple(fleet),
            vpp_before=before,
            vpp_after=after,
            horizon=float(doc.get("horizon_s", 7200.0)),
            dt_grid=float(doc.get("dt_grid_s", 2.0)),
            coordinator_period=float(doc.get("coordinator_period_s", 60.0)),
            measurement_period=float(doc.get("measurement_period_s", 60.0)),
            der_period=float(doc.get("der_period_s", 10.0)),
            v_min=float(bounds.get("v_min", 0.95)),
            v_max=float(bounds.get("v_max", 1.03)),
            vpp_halfwidth=float(bounds.get("vpp_halfwidth_mw", 0.01)),
            disturbance_time=t_dist,
            faults=tuple(faults),
            master_seed=int(doc.get("master_seed", 0)),
            alpha=float(doc.get("alpha", DEFAULT_ALPHA)),
            alpha_v=None if doc.get("alpha_v") is None else float(doc["alpha_v"]),
            beta=float(doc.get("beta", DEFAULT_BETA)),
            dual_decay=float(doc.get("dual_decay", DEFAULT_DUAL_DECAY)),
            pv_knots=pv_knots,
            load_knots=load_knots,
            metric=MetricSpec(
                duration_s=float(metric.get("duration_s", 2400.0)),
                tol_v=float(metric.get("tol_v", 0.002)),
                tol_p_mw=float(metric.get("tol_p_mw", 0.02)),
                window_s=float(metric.get("window_s", 60.0)),
            ),
            source=source,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve(base_dir: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base_dir / path


def _load_fleet(base_dir: Path, p: str) -> list[DerUnit]:
    try:
        return fleet_from_json(json.loads(_resolve(base_dir, p).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "fleet.path") from exc


def load_scenario(path) -> Scenario:
    path = Path(path)
    return scenario_from_json(json.loads(path.read_text()), base_dir=path.parent)


def default_scenario(**overrides) -> Scenario:
    """Desk-scale scenario with every default applied."""
    sc = scenario_from_json({})
    return replace(sc, **overrides) if overrides else sc


def fleet_document(fleet) -> list[dict]:
    return fleet_to_json(list(fleet))
