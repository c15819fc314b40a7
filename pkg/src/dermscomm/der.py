"""Curtailable PV and battery models.

Sign convention: positive p is injection into the grid, which for a battery
means discharging. Powers are in kW/kVAr, energies in kWh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import PHASES, FeederModel

SOC_MIN = 0.05
SOC_MAX = 0.95

PV_CAPACITY_RANGE = (0.04, 34.0)
BATTERY_ENERGY_RANGE = (13.5, 54.0)


@dataclass(frozen=True)
class DerUnit:
    id: str
    node: int
    phase: int
    kind: str  # "pv" or "battery"
    s_rating: float
    p_rating: float
    cost_cp: float = 0.0
    cost_cq: float = 0.0
    cost_cs: float = 0.0
    e_capacity: float = 0.0
    soc_pref: float = 0.5

    def __post_init__(self):
        if self.kind not in ("pv", "battery"):
            raise ValueError(f"unknown DER kind {self.kind!r}")
        if self.s_rating <= 0:
            raise ValueError("s_rating must be positive")
        if not 0 < self.p_rating <= self.s_rating:
            raise ValueError("p_rating must lie in (0, s_rating]")
        if min(self.cost_cp, self.cost_cq, self.cost_cs) < 0:
            raise ValueError("cost coefficients must be nonnegative")
        if self.kind == "battery":
            if self.e_capacity <= 0:
                raise ValueError("battery e_capacity must be positive")
            if not 0 < self.soc_pref < 1:
                raise ValueError("battery soc_pref must lie in (0, 1)")

    @property
    def is_battery(self) -> bool:
        return self.kind == "battery"

    def to_json(self) -> dict:
        doc = {
            "id": self.id,
            "node": self.node,
            "phase": PHASES[self.phase],
            "kind": self.kind,
            "s_rating_kw": self.s_rating,
            "p_rating_kw": self.p_rating,
            "cost_cp": self.cost_cp,
            "cost_cq": self.cost_cq,
            "cost_cs": self.cost_cs,
        }
        if self.is_battery:
            doc["e_capacity_kwh"] = self.e_capacity
            doc["soc_pref"] = self.soc_pref
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> DerUnit:
        s = float(doc["s_rating_kw"])
        return cls(
            id=str(doc["id"]),
            node=int(doc["node"]),
            phase=PHASES.index(doc["phase"]),
            kind=doc["kind"],
            s_rating=s,
            p_rating=float(doc.get("p_rating_kw", s)),
            cost_cp=float(doc.get("cost_cp", 0.0)),
            cost_cq=float(doc.get("cost_cq", 0.0)),
            cost_cs=float(doc.get("cost_cs", 0.0)),
            e_capacity=float(doc.get("e_capacity_kwh", 0.0)),
            soc_pref=float(doc.get("soc_pref", 0.5)),
        )


@dataclass
class DerState:
    p: float = 0.0
    q: float = 0.0
    p_avail: float = 0.0
    soc: float = 0.5
    meas_p: float = 0.0
    meas_q: float = 0.0


@dataclass(frozen=True)
class FeasibleSet:
    """{p_min <= p <= p_max, p^2 + q^2 <= s_max^2}"""

    p_min: float
    p_max: float
    s_max: float

    def contains(self, p: float, q: float, tol: float = 1e-9) -> bool:
        return (
            self.p_min - tol <= p <= self.p_max + tol
            and p * p + q * q <= self.s_max * self.s_max * (1 + tol) + tol
        )

    def q_limit(self, p: float) -> float:
        return math.sqrt(max(0.0, self.s_max * self.s_max - p * p))


def _soc_per_kw(unit: DerUnit, dt: float) -> float:
    return dt / (3600.0 * unit.e_capacity)


def feasible_set(unit: DerUnit, state: DerState, dt: float = 10.0) -> FeasibleSet:
    """Feasible setpoints; for batteries ``dt`` is the SOC look-ahead horizon."""
    if not unit.is_battery:
        return FeasibleSet(0.0, min(max(state.p_avail, 0.0), unit.p_rating), unit.s_rating)
    k = _soc_per_kw(unit, dt)
    pr = unit.p_rating
    lo = min(max((state.soc - SOC_MAX) / k, -pr), pr)
    hi = min(max((state.soc - SOC_MIN) / k, -pr), pr)
    return FeasibleSet(lo, hi, unit.s_rating)


def project_setpoint(unit: DerUnit, state: DerState, p: float, q: float, dt: float = 10.0) -> tuple[float, float]:
    """Active-power-priority projection: clamp p to its interval, then q to the disk."""
    fs = feasible_set(unit, state, dt)
    p = min(max(p, fs.p_min), fs.p_max)
    qmax = fs.q_limit(p)
    q = min(max(q, -qmax), qmax)
    return p, q


def cost(unit: DerUnit, state: DerState, p: float, q: float, dt: float = 10.0) -> float:
    if unit.is_battery:
        soc_next = state.soc - p * _soc_per_kw(unit, dt)
        return unit.cost_cs * (soc_next - unit.soc_pref) ** 2 + unit.cost_cq * q * q
    return unit.cost_cp * (p - state.p_avail) ** 2 + unit.cost_cq * q * q


def cost_gradient(unit: DerUnit, state: DerState, p: float, q: float, dt: float = 10.0) -> tuple[float, float]:
    if unit.is_battery:
        k = _soc_per_kw(unit, dt)
        soc_next = state.soc - p * k
        return -2.0 * unit.cost_cs * (soc_next - unit.soc_pref) * k, 2.0 * unit.cost_cq * q
    return 2.0 * unit.cost_cp * (p - state.p_avail), 2.0 * unit.cost_cq * q


def step_battery_soc(unit: DerUnit, state: DerState, dt: float) -> float:
    if not unit.is_battery:
        raise ValueError(f"{unit.id} is not a battery")
    return min(max(state.soc - state.p * _soc_per_kw(unit, dt), 0.0), 1.0)


@dataclass(frozen=True)
class FleetCosts:
    """Unscaled cost coefficients; per-unit values scale with capacity.

    PV curtailment and reactive costs are defined on capacity-normalized
    power, c * s * (dp / s)^2, so the per-kW^2 coefficient is c / s. The
    battery SOC cost is already normalized and scales as c * e_capacity.
    """

    pv_p: float = 0.4
    q: float = 0.4
    soc: float = 10.0


def build_fleet(
    feeder: FeederModel,
    pv_count: int,
    battery_fraction: float,
    seed: int,
    *,
    costs: FleetCosts = FleetCosts(),
    battery_c_rate: float = 1.0,
) -> list[DerUnit]:
    """Place PV units on distinct node/phase slots, pairing some with batteries.

    PV units rotate through the phases so that every phase carries a similar
    unit count; batteries are assigned to every ``1/battery_fraction``-th PV
    in that order. Battery power rating is ``battery_c_rate * e_capacity``.
    """
    slots = 3 * (feeder.node_count - 1)
    if pv_count < 0 or pv_count > slots:
        raise ValueError(f"pv_count must lie in [0, {slots}]")
    if not 0.0 <= battery_fraction <= 1.0:
        raise ValueError("battery_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    per_phase = [rng.permutation(np.arange(1, feeder.node_count)) for _ in range(3)]
    lo, hi = PV_CAPACITY_RANGE
    caps = np.exp(rng.uniform(np.log(lo), np.log(hi), size=pv_count))
    n_batt = int(round(battery_fraction * pv_count))
    batt_idx = set(np.floor(np.arange(n_batt) * pv_count / n_batt).astype(int).tolist()) if n_batt else set()
    energies = rng.uniform(*BATTERY_ENERGY_RANGE, size=pv_count)

    fleet = []
    for i in range(pv_count):
        phase = i % 3
        node = int(per_phase[phase][i // 3])
        s = float(caps[i])
        fleet.append(
            DerUnit(
                id=f"pv{i:03d}",
                node=node,
                phase=phase,
                kind="pv",
                s_rating=s,
                p_rating=s,
                cost_cp=costs.pv_p / s,
                cost_cq=costs.q / s,
            )
        )
        if i in batt_idx:
            e = float(energies[i])
            pr = battery_c_rate * e
            fleet.append(
                DerUnit(
                    id=f"bat{i:03d}",
                    node=node,
                    phase=phase,
                    kind="battery",
                    s_rating=pr,
                    p_rating=pr,
                    cost_cq=costs.q / pr,
                    cost_cs=costs.soc * e,
                    e_capacity=e,
                    soc_pref=0.5,
                )
            )
    return fleet


def fleet_to_json(fleet: list[DerUnit]) -> list[dict]:
    return [u.to_json() for u in fleet]


def fleet_from_json(docs) -> list[DerUnit]:
    """Accepts a list of unit documents or ``{"units": [...]}``."""
    if isinstance(docs, dict):
        docs = docs["units"]
    return [DerUnit.from_json(d) for d in docs]
