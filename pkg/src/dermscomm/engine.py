"""Fixed-step co-simulation loop for feeder, DERs, coordinator and local controllers.

Within every grid step the processing order is fixed: profiles and DER
availability, feeder solve, grid-service measurement sends, coordinator,
direction-signal sends, DER measurement sends, local controllers, setpoint
delivery, battery SOC, trace record. Messages carry continuous timestamps and
are consumed at the first stage whose time is at or after their delivery time.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .comm import Category, Channel, Message, Transport, resolve_categories, select_faulty_channels
from .controller import (
    DualState,
    GridMeasurement,
    GridServiceBounds,
    LocalController,
    PQMeasurement,
    SignalMap,
    compute_direction_signals,
    coordinator_dual_update,
    step_setpoint,
)
from .der import DerState, DerUnit, feasible_set, project_setpoint, step_battery_soc
from .network import compute_feeder_head_power, compute_voltages
from .scenario import Scenario, build_load_profile, build_pv_profile

TRACE_HEADER = [
    "t_s",
    "v_min_meas",
    "v_max_meas",
    "p0_a_mw",
    "p0_b_mw",
    "p0_c_mw",
    "mu_norm",
    "lambda_norm",
    "msgs_sent",
    "msgs_dropped",
    "msgs_delivered",
]


@dataclass
class TraceRecord:
    t: float
    v_min_meas: float
    v_max_meas: float
    p0: tuple[float, float, float]
    mu_norm: float
    lambda_norm: float
    msgs_sent: int
    msgs_dropped: int
    msgs_delivered: int
    vpp_setpoint: tuple[float, float, float]
    setpoints: dict[str, tuple[float, float]] | None = None


@dataclass
class Trace:
    records: list[TraceRecord]
    bounds: GridServiceBounds
    disturbance_time: float
    counters: dict[str, dict[str, int]] = field(default_factory=dict)
    max_dual: float = 0.0
    min_dual: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def p0(self) -> np.ndarray:
        return np.array([r.p0 for r in self.records])

    def to_csv(self, header_comment: dict | None = None, verbose: bool = False) -> str:
        buf = io.StringIO()
        if header_comment is not None:
            buf.write("# " + json.dumps(header_comment, sort_keys=True) + "\n")
        der_ids = sorted(self.records[0].setpoints) if verbose and self.records and self.records[0].setpoints else []
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER + [f"{d}_{x}" for d in der_ids for x in ("p_kw", "q_kvar")])
        for r in self.records:
            row = [
                _fmt(r.t),
                _fmt(r.v_min_meas),
                _fmt(r.v_max_meas),
                *(_fmt(v) for v in r.p0),
                _fmt(r.mu_norm),
                _fmt(r.lambda_norm),
                r.msgs_sent,
                r.msgs_dropped,
                r.msgs_delivered,
            ]
            for d in der_ids:
                row.extend(_fmt(v) for v in r.setpoints[d])
            w.writerow(row)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


class InfeasibleSetpoint(AssertionError):
    pass


@dataclass
class _Der:
    unit: DerUnit
    state: DerState
    slot: tuple[int, int]
    commanded: tuple[float, float]


class Simulation:
    """One scenario run. ``use_comm=False`` bypasses the transport with direct calls."""

    def __init__(self, scenario: Scenario, use_comm: bool = True, record_setpoints: bool = False):
        self.sc = sc = scenario
        self.use_comm = use_comm
        self.record_setpoints = record_setpoints
        self.feeder = sc.feeder
        self.loads = build_load_profile(sc.feeder, sc.horizon, sc.load_knots)
        self.pv = build_pv_profile(sc.horizon, sc.pv_knots)
        self.bounds = GridServiceBounds(
            sc.v_min, sc.v_max, step_setpoint(sc.vpp_before, sc.vpp_after, sc.disturbance_time), sc.vpp_halfwidth
        )

        self.ders: list[_Der] = []
        for u in sc.fleet:
            st = DerState(soc=u.soc_pref if u.is_battery else 0.0)
            self.ders.append(_Der(u, st, (u.phase, u.node), (0.0, 0.0)))
        self.der_by_id = {d.unit.id: d for d in self.ders}

        # Every PV doubles as a voltage sensor at its node.
        self.sensors = sorted({d.slot for d in self.ders if d.unit.kind == "pv"})
        slots = sorted({d.slot for d in self.ders})
        self.controllers: dict[tuple[int, int], LocalController] = {
            s: LocalController(
                f"lc_{s[0]}_{s[1]}", [d.unit for d in self.ders if d.slot == s], sc.beta, sc.der_period
            )
            for s in slots
        }
        self.duals = DualState.zeros(self.sensors, sc.alpha, sc.alpha_v, sc.dual_decay)
        self.units = [d.unit for d in self.ders]
        self.signal_map = SignalMap.build(self.feeder, self.units, self.sensors)
        self.store: dict[tuple, GridMeasurement] = {}
        self.pq_inbox: list[PQMeasurement] = []
        self.sp_inbox: list = []
        self.max_dual = 0.0
        self.min_dual = 0.0

        self.transport = Transport()
        if use_comm:
            self._build_channels()
        elif sc.faults:
            raise ValueError("faults need the comm transport")

        self._init_state(0.0)

    # -- wiring --------------------------------------------------------------

    def _build_channels(self) -> None:
        seed = self.sc.master_seed
        tr = self.transport
        for ph, node in self.sensors:
            tr.add(Channel(f"v_{ph}_{node}", Category.VOLTAGE, f"sensor_{ph}_{node}", "coordinator", seed=seed))
        for ph in range(3):
            tr.add(Channel(f"p0_{ph}", Category.FEEDER_HEAD, f"meter_{ph}", "coordinator", seed=seed))
        for slot, lc in self.controllers.items():
            tr.add(Channel(f"dir_{lc.id}", Category.DIRECTION, "coordinator", lc.id, seed=seed))
        for d in self.ders:
            lc = self.controllers[d.slot]
            tr.add(Channel(f"sp_{d.unit.id}", Category.SETPOINT, lc.id, d.unit.id, seed=seed))
            tr.add(Channel(f"pq_{d.unit.id}", Category.PQ_MEASUREMENT, d.unit.id, lc.id, seed=seed))
        for i, spec in enumerate(self.sc.faults):
            cats = resolve_categories(spec.category, spec.subcategory)
            ids = [c.id for c in tr.channels.values() if c.category in cats]
            model = spec.fault_model()
            # channel choice follows the master seed as well as the fault's own seed
            pick = int(np.random.SeedSequence([seed, spec.seed, i]).generate_state(1)[0])
            for cid in select_faulty_channels(ids, spec.channel_fraction, pick):
                tr.channels[cid].fault = model

    def _init_state(self, t: float) -> None:
        frac = self.pv.at(t)
        for d in self.ders:
            if d.unit.kind == "pv":
                d.state.p_avail = frac * d.unit.s_rating
                d.commanded = (d.state.p_avail, 0.0)
            else:
                d.commanded = (0.0, 0.0)
            self._apply(d)

    # -- helpers -------------------------------------------------------------

    def _apply(self, d: _Der) -> None:
        p, q = project_setpoint(d.unit, d.state, *d.commanded, self.sc.der_period)
        d.state.p, d.state.q = p, q
        if not feasible_set(d.unit, d.state, self.sc.der_period).contains(p, q, 1e-9):
            raise InfeasibleSetpoint(f"{d.unit.id} at ({p}, {q})")

    def _on_tick(self, t: float, period: float) -> bool:
        k = t / period
        return abs(k - round(k)) < 1e-9

    def _route(self, msgs: list[Message]) -> None:
        for m in msgs:
            cat = self.transport.channels[m.channel_id].category
            self._dispatch(cat, m.payload)

    def _dispatch(self, cat: Category, payload) -> None:
        if cat is Category.VOLTAGE or cat is Category.FEEDER_HEAD:
            cur = self.store.get(payload.source)
            if cur is None or payload.t >= cur.t:
                self.store[payload.source] = payload
        elif cat is Category.DIRECTION:
            for sig in payload:
                self.controllers[self.der_by_id[sig.der_id].slot].receive_signal(sig)
        elif cat is Category.PQ_MEASUREMENT:
            self.pq_inbox.append(payload)
        else:
            self.sp_inbox.append(payload)

    def _send(self, channel_id: str, cat: Category, payload, t: float) -> None:
        if self.use_comm:
            self.transport.send(channel_id, payload, t)
        else:
            self._dispatch(cat, payload)

    def _deliver(self, t: float) -> None:
        if self.use_comm:
            self._route(self.transport.deliver_due(t))

    # -- main loop -----------------------------------------------------------

    def step(self, t: float) -> TraceRecord:
        sc = self.sc
        # (1) exogenous profiles
        p_load, q_load = self.loads.at(t)
        frac = self.pv.at(t)
        for d in self.ders:
            if d.unit.kind == "pv":
                d.state.p_avail = frac * d.unit.s_rating
            self._apply(d)

        # (2) feeder state
        p_inj = np.zeros((3, self.feeder.node_count))
        q_inj = np.zeros_like(p_inj)
        for d in self.ders:
            ph, node = d.slot
            p_inj[ph, node] += d.state.p / 1000.0
            q_inj[ph, node] += d.state.q / 1000.0
        v = compute_voltages(self.feeder, p_inj, q_inj, p_load, q_load)
        p0 = compute_feeder_head_power(self.feeder, p_inj, p_load)

        # (3) grid-service measurements
        if self._on_tick(t, sc.measurement_period):
            for ph, node in self.sensors:
                self._send(f"v_{ph}_{node}", Category.VOLTAGE, GridMeasurement(t, "voltage", ph, float(v[ph, node]), node), t)
            for ph in range(3):
                self._send(f"p0_{ph}", Category.FEEDER_HEAD, GridMeasurement(t, "feeder_head", ph, float(p0[ph])), t)
        self._deliver(t)

        # (4) coordinator
        if self._on_tick(t, sc.coordinator_period):
            self.duals = coordinator_dual_update(self.duals, self.bounds, self.store, t)
            lo = min(self.duals.mu_upper.min(initial=0), self.duals.mu_lower.min(initial=0),
                     self.duals.lambda_upper.min(), self.duals.lambda_lower.min())
            self.min_dual = min(self.min_dual, lo)
            self.max_dual = max(self.max_dual, self.duals.mu_norm, self.duals.lambda_norm)
            signals = compute_direction_signals(self.duals, self.feeder, self.units, t, self.signal_map)
            by_slot: dict[tuple[int, int], list] = {}
            for d, sig in zip(self.ders, signals):
                by_slot.setdefault(d.slot, []).append(sig)
            for slot, lc in self.controllers.items():
                self._send(f"dir_{lc.id}", Category.DIRECTION, tuple(by_slot[slot]), t)
        self._deliver(t)

        # (5) DER measurements, local controllers, setpoints
        if self._on_tick(t, sc.der_period):
            for d in self.ders:
                meas = PQMeasurement(d.unit.id, d.state.p, d.state.q, t, d.state.p_avail, d.state.soc)
                d.state.meas_p, d.state.meas_q = d.state.p, d.state.q
                self._send(f"pq_{d.unit.id}", Category.PQ_MEASUREMENT, meas, t)
        self._deliver(t)
        inbox, self.pq_inbox = self.pq_inbox, []
        for meas in inbox:
            d = self.der_by_id[meas.der_id]
            sp = self.controllers[d.slot].on_measurement(d.unit, meas, t)
            self._send(f"sp_{d.unit.id}", Category.SETPOINT, sp, t)
        self._deliver(t)
        inbox, self.sp_inbox = self.sp_inbox, []
        for sp in inbox:
            d = self.der_by_id[sp.der_id]
            d.commanded = (sp.p, sp.q)
            self._apply(d)

        # (6) battery energy
        for d in self.ders:
            if d.unit.is_battery:
                d.state.soc = step_battery_soc(d.unit, d.state, sc.dt_grid)

        sent, dropped, delivered = self.transport.totals()
        vs = np.array([v[ph, node] for ph, node in self.sensors]) if self.sensors else v.ravel()
        return TraceRecord(
            t=t,
            v_min_meas=float(vs.min()),
            v_max_meas=float(vs.max()),
            p0=tuple(float(x) for x in p0),
            mu_norm=self.duals.mu_norm,
            lambda_norm=self.duals.lambda_norm,
            msgs_sent=sent,
            msgs_dropped=dropped,
            msgs_delivered=delivered,
            vpp_setpoint=tuple(float(x) for x in self.bounds.vpp_setpoint(t)),
            setpoints={d.unit.id: (d.state.p, d.state.q) for d in self.ders} if self.record_setpoints else None,
        )

    def run(self) -> Trace:
        n_steps = int(math.floor(self.sc.horizon / self.sc.dt_grid + 1e-9))
        records = [self.step(k * self.sc.dt_grid) for k in range(n_steps + 1)]
        counters = {
            c.value: {
                "sent": self.transport.sent[c],
                "dropped": self.transport.dropped[c],
                "delivered": self.transport.delivered[c],
            }
            for c in Category
        }
        return Trace(records, self.bounds, self.sc.disturbance_time, counters, self.max_dual, self.min_dual)


def run_scenario(scenario: Scenario, record_setpoints: bool = False) -> Trace:
    return Simulation(scenario, use_comm=True, record_setpoints=record_setpoints).run()


def run_direct(scenario: Scenario, record_setpoints: bool = False) -> Trace:
    """Same control loop with every message handed over by direct call."""
    return Simulation(scenario, use_comm=False, record_setpoints=record_setpoints).run()
