"""Hierarchical primal-dual DERMS.

The coordinator runs projected dual ascent on voltage and VPP band
violations and turns the multipliers into per-DER direction signals. Each
local controller takes a projected gradient step from the latest measured
injection of its DER.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .der import DerState, DerUnit, cost_gradient, project_setpoint
from .network import FeederModel


@dataclass(frozen=True)
class GridMeasurement:
    t: float
    kind: str  # "voltage" or "feeder_head"
    phase: int
    value: float
    node: int | None = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("measurement timestamp must be nonnegative")
        if self.kind == "voltage" and self.node is None:
            raise ValueError("voltage measurements need a node")
        if self.kind == "feeder_head" and self.node is not None:
            raise ValueError("feeder-head measurements carry no node")
        if self.kind not in ("voltage", "feeder_head"):
            raise ValueError(f"unknown measurement kind {self.kind!r}")

    @property
    def source(self) -> tuple:
        return (self.kind, self.phase, self.node)


@dataclass(frozen=True)
class DirectionSignal:
    der_id: str
    d_p: float
    d_q: float
    t: float


@dataclass(frozen=True)
class PQMeasurement:
    """Injection report from a DER; also carries what its controller needs
    to evaluate the local cost (PV availability, battery SOC)."""

    der_id: str
    p: float
    q: float
    t: float
    p_avail: float = 0.0
    soc: float = 0.5


@dataclass(frozen=True)
class Setpoint:
    der_id: str
    p: float
    q: float
    t: float


@dataclass(frozen=True)
class GridServiceBounds:
    """Voltage band and per-phase VPP band.

    ``vpp_setpoint`` maps a time in seconds to three per-phase setpoints
    in MW.
    """

    v_min: float
    v_max: float
    vpp_setpoint: Callable[[float], np.ndarray]
    vpp_halfwidth: float

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.vpp_halfwidth <= 0:
            raise ValueError("vpp_halfwidth must be positive")


def step_setpoint(before, after, t_step: float) -> Callable[[float], np.ndarray]:
    before = np.asarray(before, dtype=float)
    after = np.asarray(after, dtype=float)

    def setpoint(t: float) -> np.ndarray:
        return after if t >= t_step else before

    return setpoint


@dataclass(frozen=True)
class DualState:
    """Nonnegative multipliers held by the coordinator.

    ``voltage_sources`` lists the monitored (phase, node) pairs in the order
    used by ``mu_upper``/``mu_lower``. ``alpha_v`` is the step for the voltage
    multipliers; it defaults to ``alpha``. ``decay`` regularizes the ascent
    (each step subtracts ``alpha * decay * multiplier``); zero gives plain
    projected dual ascent.
    """

    voltage_sources: tuple[tuple[int, int], ...]
    mu_upper: np.ndarray
    mu_lower: np.ndarray
    lambda_upper: np.ndarray
    lambda_lower: np.ndarray
    alpha: float = 1.0
    alpha_v: float | None = None
    decay: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or (self.alpha_v is not None and self.alpha_v <= 0):
            raise ValueError("dual step sizes must be positive")
        if self.decay < 0:
            raise ValueError("decay must be nonnegative")

    @classmethod
    def zeros(
        cls,
        voltage_sources: Sequence[tuple[int, int]],
        alpha: float = 1.0,
        alpha_v: float | None = None,
        decay: float = 0.0,
    ):
        m = len(voltage_sources)
        return cls(
            tuple(voltage_sources), np.zeros(m), np.zeros(m), np.zeros(3), np.zeros(3), alpha, alpha_v, decay
        )

    @property
    def voltage_step(self) -> float:
        return self.alpha if self.alpha_v is None else self.alpha_v

    @property
    def mu_norm(self) -> float:
        return float(np.linalg.norm(np.concatenate([self.mu_upper, self.mu_lower])))

    @property
    def lambda_norm(self) -> float:
        return float(np.linalg.norm(np.concatenate([self.lambda_upper, self.lambda_lower])))


def coordinator_dual_update(
    duals: DualState,
    bounds: GridServiceBounds,
    measurements: Mapping[tuple, GridMeasurement],
    t: float,
) -> DualState:
    """One projected dual-ascent step.

    ``measurements`` holds the latest received value per source key
    (``GridMeasurement.source``). A source with no entry contributes zero
    violation.
    """
    av = duals.voltage_step
    r = duals.decay
    mu_u = duals.mu_upper.copy()
    mu_l = duals.mu_lower.copy()
    for k, (ph, node) in enumerate(duals.voltage_sources):
        m = measurements.get(("voltage", ph, node))
        if m is None:
            up = low = 0.0
        else:
            up = m.value - bounds.v_max
            low = bounds.v_min - m.value
        mu_u[k] = max(0.0, mu_u[k] + av * (up - r * mu_u[k]))
        mu_l[k] = max(0.0, mu_l[k] + av * (low - r * mu_l[k]))

    setpoint = bounds.vpp_setpoint(t)
    hw = bounds.vpp_halfwidth
    lam_u = duals.lambda_upper.copy()
    lam_l = duals.lambda_lower.copy()
    for ph in range(3):
        m = measurements.get(("feeder_head", ph, None))
        if m is None:
            up = low = 0.0
        else:
            up = m.value - (setpoint[ph] + hw)
            low = (setpoint[ph] - hw) - m.value
        lam_u[ph] = max(0.0, lam_u[ph] + duals.alpha * (up - r * lam_u[ph]))
        lam_l[ph] = max(0.0, lam_l[ph] + duals.alpha * (low - r * lam_l[ph]))
    return replace(duals, mu_upper=mu_u, mu_lower=mu_l, lambda_upper=lam_u, lambda_lower=lam_l)


@dataclass(frozen=True)
class SignalMap:
    """Precomputed sensitivity rows mapping multipliers to DER signals."""

    der_ids: tuple[str, ...]
    phases: np.ndarray
    rp: np.ndarray  # (n_der, n_sources)
    rq: np.ndarray

    @classmethod
    def build(cls, feeder: FeederModel, fleet: Sequence[DerUnit], voltage_sources) -> SignalMap:
        n, m = len(fleet), len(voltage_sources)
        rp = np.zeros((n, m))
        rq = np.zeros((n, m))
        for i, u in enumerate(fleet):
            for k, (ph, node) in enumerate(voltage_sources):
                if ph == u.phase:
                    rp[i, k] = feeder.r_sens[ph, node, u.node] / feeder.s_base
                    rq[i, k] = feeder.x_sens[ph, node, u.node] / feeder.s_base
        return cls(tuple(u.id for u in fleet), np.array([u.phase for u in fleet], dtype=int), rp, rq)


def compute_direction_signals(
    duals: DualState,
    feeder: FeederModel,
    fleet: Sequence[DerUnit],
    t: float = 0.0,
    signal_map: SignalMap | None = None,
) -> list[DirectionSignal]:
    sm = signal_map or SignalMap.build(feeder, fleet, duals.voltage_sources)
    mu = duals.mu_upper - duals.mu_lower
    lam = duals.lambda_upper - duals.lambda_lower
    d_p = sm.rp @ mu - lam[sm.phases]
    d_q = sm.rq @ mu
    return [DirectionSignal(i, float(a), float(b), t) for i, a, b in zip(sm.der_ids, d_p, d_q)]


def local_primal_update(
    unit: DerUnit,
    state: DerState,
    signal: DirectionSignal | None,
    measured: tuple[float, float],
    beta: float,
    dt: float,
) -> tuple[float, float]:
    """Projected gradient step taken from the measured injection.

    ``beta`` is the step size in kW per unit gradient for this DER.
    """
    p, q = measured
    gp, gq = cost_gradient(unit, state, p, q, dt)
    dp, dq = (signal.d_p, signal.d_q) if signal is not None else (0.0, 0.0)
    return project_setpoint(unit, state, p - beta * (gp + dp), q - beta * (gq + dq), dt)


def primal_step_size(unit: DerUnit, beta: float) -> float:
    """Capacity-normalized primal step: ``beta * s_rating``."""
    return beta * unit.s_rating


@dataclass
class LocalController:
    """Controller serving every DER at one node/phase slot."""

    id: str
    units: list[DerUnit]
    beta: float
    dt: float
    signals: dict[str, DirectionSignal] = field(default_factory=dict)

    def receive_signal(self, sig: DirectionSignal) -> None:
        cur = self.signals.get(sig.der_id)
        if cur is None or sig.t >= cur.t:
            self.signals[sig.der_id] = sig

    def on_measurement(self, unit: DerUnit, meas: PQMeasurement, t: float) -> Setpoint:
        view = DerState(p=meas.p, q=meas.q, p_avail=meas.p_avail, soc=meas.soc, meas_p=meas.p, meas_q=meas.q)
        p, q = local_primal_update(
            unit,
            view,
            self.signals.get(unit.id),
            (meas.p, meas.q),
            primal_step_size(unit, self.beta),
            self.dt,
        )
        return Setpoint(unit.id, p, q, t)
