"""Functionality metric, Monte Carlo acceptance, and severity-limit search."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .engine import run_scenario
from .scenario import (
    ConfigError,
    FaultSpec,
    MetricSpec,
    Scenario,
    load_scenario,
    scenario_from_json,
    validate,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FunctionalityMetric:
    duration: float = 2400.0
    tol_v: float = 0.002
    tol_p: float = 0.02
    window: float = 60.0

    def __post_init__(self):
        if not self.duration > self.window > 0:
            raise ValueError("need duration > window > 0")
        if self.tol_v < 0 or self.tol_p < 0:
            raise ValueError("tolerances must be nonnegative")

    @classmethod
    def from_spec(cls, spec: MetricSpec) -> FunctionalityMetric:
        return cls(spec.duration_s, spec.tol_v, spec.tol_p_mw, spec.window_s)


@dataclass(frozen=True)
class Verdict:
    functional: bool
    first_satisfied: float | None

    def __bool__(self) -> bool:
        return self.functional


def in_bounds_mask(trace, metric: FunctionalityMetric) -> np.ndarray:
    """Per-record flag: every grid-service measurement inside its widened bounds."""
    b = trace.bounds
    recs = trace.records
    vmin = np.array([r.v_min_meas for r in recs])
    vmax = np.array([r.v_max_meas for r in recs])
    p0 = np.array([r.p0 for r in recs])
    sp = np.array([r.vpp_setpoint for r in recs])
    half = b.vpp_halfwidth + metric.tol_p
    ok = (vmin >= b.v_min - metric.tol_v) & (vmax <= b.v_max + metric.tol_v)
    ok &= np.all((p0 >= sp - half) & (p0 <= sp + half), axis=1)
    return ok


def is_functional(trace, metric: FunctionalityMetric, disturbance_time: float | None = None) -> Verdict:
    """Judge the settle window [t_d + T - W, t_d + T] against widened bounds.

    Comparisons are inclusive. ``first_satisfied`` is the start of the run of
    in-bounds samples that reaches the end of the window, if functional.
    """
    td = trace.disturbance_time if disturbance_time is None else disturbance_time
    t_end = td + metric.duration
    times = np.array([r.t for r in trace.records])
    if len(times) == 0 or times[-1] < t_end - 1e-9 or times[0] > td + 1e-9:
        raise ValueError(f"trace does not cover [{td}, {t_end}]")
    ok = in_bounds_mask(trace, metric)
    span = (times >= td - 1e-9) & (times <= t_end + 1e-9)
    window = span & (times >= t_end - metric.window - 1e-9)
    if not ok[window].all():
        return Verdict(False, None)
    idx = np.flatnonzero(span)
    first = idx[-1]
    while first - 1 >= idx[0] and ok[first - 1]:
        first -= 1
    return Verdict(True, float(times[first]))


# ---------------------------------------------------------------- trials


def trial_seed(master_seed: int, family: int, trial: int) -> int:
    """64-bit seed for one Monte Carlo trial; families give independent seed sets."""
    hi, lo = np.random.SeedSequence([master_seed, family, trial]).generate_state(2)
    return (int(hi) << 32) | int(lo)


def _is_deterministic(faults: Sequence[FaultSpec]) -> bool:
    return all(not f.is_random and f.channel_fraction in (0.0, 1.0) for f in faults)


def seeded_trial(template: Scenario, faults: Sequence[FaultSpec], seed: int) -> Scenario:
    """The template with its fault set, keyed to master seed ``seed``."""
    return replace(template, master_seed=seed, faults=tuple(faults))


def _run_trial(args) -> bool:
    scenario, metric = args
    return bool(is_functional(run_scenario(scenario), metric))


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class FractionResult:
    fraction: float
    seeds: tuple[int, ...]
    verdicts: tuple[bool, ...]


def functional_fraction(
    template: Scenario,
    faults: FaultSpec | Sequence[FaultSpec] | None,
    trials: int,
    seeds: Sequence[int] | None = None,
    metric: FunctionalityMetric | None = None,
    jobs: int = 1,
) -> FractionResult:
    """Fraction of ``trials`` seeded runs that are functional.

    Trials differ only in the fault RNG streams. A fault set with no
    randomness runs once and the verdict stands for every trial.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if faults is None:
        faults = ()
    elif isinstance(faults, FaultSpec):
        faults = (faults,)
    faults = tuple(faults)
    metric = metric or FunctionalityMetric.from_spec(template.metric)
    if seeds is None:
        seeds = [trial_seed(template.master_seed, 0, k) for k in range(trials)]
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) != trials:
        raise ValueError("need one seed per trial")
    if _is_deterministic(faults):
        v = _run_trial((seeded_trial(template, faults, seeds[0]), metric))
        verdicts = (v,) * trials
    else:
        verdicts = tuple(_map(_run_trial, [(seeded_trial(template, faults, s), metric) for s in seeds], jobs))
    return FractionResult(sum(verdicts) / trials, seeds, verdicts)


# ---------------------------------------------------------------- limit search


class BaselineBroken(RuntimeError):
    """The predicate already fails at the lower end of the search range."""


@dataclass(frozen=True)
class LimitResult:
    category: str
    fault_kind: str
    secondary_param: float | None
    limit: float
    bracket_lo: float
    bracket_hi: float
    trials: int
    theta: float
    seed: int
    unbounded: bool = False
    evaluations: int = 0
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.bracket_lo <= self.limit <= self.bracket_hi:
            raise ValueError("limit must lie inside its bracket")


# predicate(severity, seed_family) -> functional?
Predicate = Callable[[float, int], bool]


def find_limit(
    predicate: Predicate,
    lo: float,
    hi: float,
    resolution: float,
    *,
    trials: int = 10,
    theta: float = 1.0,
    seed: int = 0,
    category: str = "",
    fault_kind: str = "",
    secondary: float | None = None,
    max_rounds: int = 3,
) -> LimitResult:
    """Bisect for the largest functional severity in [lo, hi].

    Bisection uses seed family 0. Once the bracket is narrower than
    ``resolution`` both ends are re-checked with fresh seed families; a
    failed re-check reopens the search on the offending side and is logged
    as a warning.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    evals = 0
    warnings: list[str] = []

    def check(s: float, family: int) -> bool:
        nonlocal evals
        evals += 1
        ok = bool(predicate(s, family))
        log.debug("severity %r family %d -> %s", s, family, "functional" if ok else "nonfunctional")
        return ok

    if not check(lo, 0):
        raise BaselineBroken(f"nonfunctional at the lower end of the range ({lo})")
    if check(hi, 0):
        return LimitResult(
            category, fault_kind, secondary, hi, hi, hi, trials, theta, seed, True, evals, tuple(warnings)
        )

    a, b = lo, hi
    family = bisect_family = 0
    confirmed = False
    for _ in range(max_rounds):
        while b - a > resolution:
            mid = 0.5 * (a + b)
            if check(mid, bisect_family):
                a = mid
            else:
                b = mid
        family += 1
        lo_ok = check(a, family)
        family += 1
        hi_bad = not check(b, family)
        if lo_ok and hi_bad:
            confirmed = True
            break
        if not lo_ok:
            warnings.append(f"re-check failed at lower end {a!r}")
            if a <= lo:
                break
            a, b, bisect_family = lo, a, family - 1
        else:
            warnings.append(f"re-check passed at upper end {b!r}")
            if b >= hi:
                break
            a, b, bisect_family = b, hi, family
    if not confirmed:
        warnings.append("bracket not confirmed by re-checks")
    for w in warnings:
        log.warning("%s/%s %s: %s", category, fault_kind, secondary, w)
    return LimitResult(category, fault_kind, secondary, a, a, b, trials, theta, seed, False, evals, tuple(warnings))


# ---------------------------------------------------------------- experiments

# Upper delay limits per category reported for the 2,000-node reference
# study, seconds; the PQ-measurement entry is an upper bound ("< 0.2").
REFERENCE_DELAY_LIMITS = {
    "feeder_head": "80",
    "voltage": "60",
    "direction": "50",
    "setpoint": "18",
    "pq_measurement": "<0.2",
}

DELAY_CATEGORIES = ("feeder_head", "voltage", "direction", "setpoint", "pq_measurement")
LOSS_CATEGORIES = ("feeder_head", "voltage", "direction", "der_link")
DEFAULT_DOWNTIMES = (60.0, 120.0, 300.0, 600.0, 1200.0)
DEFAULT_CHANNEL_FRACTIONS = (0.1, 0.25, 0.5, 0.75, 1.0)

# Faster cadences for delay experiments: grid-service and direction
# messages every 10 s, DER link every 2 s.
DELAY_PERIODS = {"measurement_period": 10.0, "coordinator_period": 10.0, "der_period": 2.0}


@dataclass(frozen=True)
class Experiment:
    """One curve point: a fault kind on a category at a fixed secondary parameter."""

    template: Scenario
    kind: str
    category: str
    secondary: float | None = None

    def __post_init__(self):
        if self.kind not in ("packet_loss", "link_failure", "delay"):
            raise ValueError(f"unknown experiment {self.kind!r}")
        self.fault(0.0)

    def fault(self, severity: float) -> FaultSpec:
        if self.kind == "packet_loss":
            frac = 1.0 if self.secondary is None else self.secondary
            return FaultSpec(self.category, "packet_loss", p_drop=severity, channel_fraction=frac)
        if self.kind == "link_failure":
            return FaultSpec(self.category, "link_failure", p_fail=severity, downtime_s=float(self.secondary or 0.0))
        return FaultSpec(self.category, "delay", latency_s=severity)


def experiment_predicate(
    exp: Experiment,
    trials: int,
    theta: float,
    master_seed: int,
    metric: FunctionalityMetric | None = None,
    jobs: int = 1,
) -> Predicate:
    def predicate(severity: float, family: int) -> bool:
        seeds = [trial_seed(master_seed, family, k) for k in range(trials)]
        res = functional_fraction(exp.template, exp.fault(severity), trials, seeds, metric, jobs)
        return res.fraction >= theta

    return predicate


@dataclass(frozen=True)
class SearchRange:
    lo: float
    hi: float
    resolution: float


def default_range(kind: str, template: Scenario) -> SearchRange:
    if kind == "delay":
        return SearchRange(0.0, template.metric.duration_s, 2.0)
    return SearchRange(0.0, 1.0, 0.02)


def limit_for(
    exp: Experiment,
    search: SearchRange,
    trials: int = 10,
    theta: float = 1.0,
    master_seed: int = 0,
    jobs: int = 1,
) -> LimitResult:
    pred = experiment_predicate(exp, trials, theta, master_seed, jobs=jobs)
    return find_limit(
        pred,
        search.lo,
        search.hi,
        search.resolution,
        trials=trials,
        theta=theta,
        seed=master_seed,
        category=exp.category,
        fault_kind=exp.kind,
        secondary=exp.secondary,
    )


@dataclass(frozen=True)
class CampaignRow:
    category: str
    fault_kind: str
    secondary_param: float | None
    result: LimitResult | None
    status: str
    trials: int
    theta: float
    seed: int
    reference: str = ""
    error: str = ""


CAMPAIGN_HEADER = (
    "category",
    "fault_kind",
    "secondary_param",
    "limit",
    "bracket_lo",
    "bracket_hi",
    "trials",
    "theta",
    "seed",
    "status",
    "reference_limit",
)


@dataclass(frozen=True)
class Campaign:
    template: Scenario
    experiment: str
    categories: tuple[str, ...]
    grid: tuple[float, ...] = ()
    search: SearchRange | None = None
    trials: int = 10
    theta: float = 1.0
    master_seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")

    def points(self) -> list[Experiment]:
        if self.experiment == "delay":
            return [Experiment(self.template, "delay", c) for c in self.categories]
        return [Experiment(self.template, self.experiment, c, float(g)) for c in self.categories for g in self.grid]


def _campaign_point(args) -> CampaignRow:
    exp, search, trials, theta, seed = args
    ref = REFERENCE_DELAY_LIMITS.get(exp.category, "") if exp.kind == "delay" else ""
    base = dict(trials=trials, theta=theta, seed=seed, reference=ref)
    try:
        res = limit_for(exp, search, trials, theta, seed)
    except BaselineBroken as e:
        return CampaignRow(exp.category, exp.kind, exp.secondary, None, "baseline_broken", error=str(e), **base)
    except Exception as e:  # recorded, not fatal
        return CampaignRow(exp.category, exp.kind, exp.secondary, None, "error", error=repr(e), **base)
    status = "unbounded" if res.unbounded else ("ok" if not res.warnings else "unconfirmed")
    return CampaignRow(exp.category, exp.kind, exp.secondary, res, status, **base)


def run_campaign(campaign: Campaign, jobs: int = 1) -> list[CampaignRow]:
    """One limit per (category, grid point); rows come back in config order."""
    search = campaign.search or default_range(campaign.experiment, campaign.template)
    args = [(e, search, campaign.trials, campaign.theta, campaign.master_seed) for e in campaign.points()]
    return _map(_campaign_point, args, jobs)


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def campaign_rows_csv(rows: Sequence[CampaignRow]) -> list[list[str]]:
    out = []
    for r in rows:
        res = r.result
        out.append(
            [
                r.category,
                r.fault_kind,
                _num(r.secondary_param),
                _num(res.limit) if res else "",
                _num(res.bracket_lo) if res else "",
                _num(res.bracket_hi) if res else "",
                str(r.trials),
                _num(r.theta),
                str(r.seed),
                r.status,
                r.reference,
            ]
        )
    return out


# ---------------------------------------------------------------- config

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

CAMPAIGN_SCHEMA = {
    "type": "object",
    "required": ["experiment"],
    "additionalProperties": False,
    "properties": {
        "scenario_ref": {"type": "string"},
        "scenario": {"type": "object"},
        "experiment": {"enum": ["packet_loss", "link_failure", "delay"]},
        "category": {
            "anyOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}],
        },
        "grid": {"type": "array", "items": _NONNEG},
        "search": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lo", "hi", "resolution"],
            "properties": {"lo": _NONNEG, "hi": _NONNEG, "resolution": _POS},
        },
        "periods": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "measurement_period_s": _POS,
                "coordinator_period_s": _POS,
                "der_period_s": _POS,
            },
        },
        "trials": {"type": "integer", "minimum": 1},
        "theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "master_seed": {"type": "integer", "minimum": 0},
    },
}


def campaign_from_json(doc: dict, base_dir: Path | None = None) -> Campaign:
    """Build a Campaign.

    ``category`` may be one name, a list, or "all" (the default), which
    expands to the four curve categories for loss and failure experiments
    and the five table categories for delay. Delay experiments run at
    10 s / 10 s / 2 s cadences unless ``periods`` says otherwise.
    """
    validate(doc, CAMPAIGN_SCHEMA)
    base_dir = base_dir or Path(".")
    kind = doc["experiment"]
    if "scenario_ref" in doc and "scenario" in doc:
        raise ConfigError("give scenario_ref or scenario, not both", "scenario_ref")
    if "scenario_ref" in doc:
        ref = Path(doc["scenario_ref"])
        template = load_scenario(ref if ref.is_absolute() else base_dir / ref)
    else:
        template = scenario_from_json(doc.get("scenario", {}), base_dir)

    if "periods" in doc:
        periods = {k[: -len("_s")]: float(v) for k, v in doc["periods"].items()}
    else:
        periods = DELAY_PERIODS if kind == "delay" else {}
    try:
        template = replace(template, **periods)
    except ValueError as exc:
        raise ConfigError(str(exc), "periods") from exc

    cat = doc.get("category", "all")
    if cat == "all":
        cats = DELAY_CATEGORIES if kind == "delay" else LOSS_CATEGORIES
    else:
        cats = (cat,) if isinstance(cat, str) else tuple(cat)

    if kind == "delay":
        grid: tuple[float, ...] = ()
    elif "grid" in doc:
        grid = tuple(float(g) for g in doc["grid"])
    else:
        grid = DEFAULT_CHANNEL_FRACTIONS if kind == "packet_loss" else DEFAULT_DOWNTIMES
    if kind == "packet_loss" and any(g > 1 for g in grid):
        raise ConfigError("channel fractions must lie in [0, 1]", "grid")

    search = None
    if "search" in doc:
        s = doc["search"]
        if not s["lo"] < s["hi"]:
            raise ConfigError("lo must be below hi", "search")
        search = SearchRange(float(s["lo"]), float(s["hi"]), float(s["resolution"]))
    try:
        camp = Campaign(
            template=template,
            experiment=kind,
            categories=cats,
            grid=grid,
            search=search,
            trials=int(doc.get("trials", 10)),
            theta=float(doc.get("theta", 1.0)),
            master_seed=int(doc.get("master_seed", 0)),
        )
        for c in cats:
            Experiment(template, kind, c)
    except ValueError as exc:
        raise ConfigError(str(exc), "category") from exc
    return camp


def load_campaign(path) -> Campaign:
    path = Path(path)
    return campaign_from_json(json.loads(path.read_text()), base_dir=path.parent)


def campaign_resolved(c: Campaign) -> dict:
    search = c.search or default_range(c.experiment, c.template)
    return {
        "experiment": c.experiment,
        "categories": list(c.categories),
        "grid": list(c.grid),
        "search": {"lo": search.lo, "hi": search.hi, "resolution": search.resolution},
        "trials": c.trials,
        "theta": c.theta,
        "master_seed": c.master_seed,
        "scenario": c.template.resolved(),
    }
