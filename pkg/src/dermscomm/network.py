"""Per-phase linear (LinDistFlow) feeder model.

Voltages are affine in the nodal injections through path-resistance and
path-reactance sensitivity matrices. Phases are decoupled, so every array
carries a leading phase axis of length 3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PHASES = ("A", "B", "C")


@dataclass(frozen=True)
class Edge:
    phase: int
    parent: int
    child: int
    r_pu: float
    x_pu: float


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Linearized three-phase radial feeder.

    Attributes:
        node_count: nodes per phase, node 0 is the substation bus.
        r_sens, x_sens: arrays of shape (3, n, n), p.u. voltage per p.u. power.
        base_voltage: shape (3, n), voltage at zero injection and nominal load.
        p_load_nom, q_load_nom: shape (3, n), nominal loads in MW / MVAr.
        s_base: MW.
    """

    node_count: int
    r_sens: np.ndarray
    x_sens: np.ndarray
    base_voltage: np.ndarray
    p_load_nom: np.ndarray
    q_load_nom: np.ndarray
    s_base: float = 1.0
    v_source: float = 1.0
    edges: tuple[Edge, ...] = field(default_factory=tuple)
    phases: tuple[str, ...] = PHASES

    def __post_init__(self):
        n = self.node_count
        for name in ("r_sens", "x_sens"):
            if getattr(self, name).shape != (3, n, n):
                raise ValueError(f"{name} must have shape (3, {n}, {n})")
        for name in ("base_voltage", "p_load_nom", "q_load_nom"):
            if getattr(self, name).shape != (3, n):
                raise ValueError(f"{name} must have shape (3, {n})")
        if len(self.phases) != 3:
            raise ValueError("exactly three phases are supported")
        for arr in (self.r_sens, self.x_sens, self.base_voltage, self.p_load_nom, self.q_load_nom):
            arr.setflags(write=False)

    def with_nominal_load(self, p_load_nom, q_load_nom) -> FeederModel:
        """Return a copy whose base voltage embeds a different nominal load."""
        p = np.asarray(p_load_nom, dtype=float).reshape(3, self.node_count)
        q = np.asarray(q_load_nom, dtype=float).reshape(3, self.node_count)
        return FeederModel(
            node_count=self.node_count,
            r_sens=self.r_sens.copy(),
            x_sens=self.x_sens.copy(),
            base_voltage=_base_voltage(self.r_sens, self.x_sens, p, q, self.s_base, self.v_source),
            p_load_nom=p,
            q_load_nom=q,
            s_base=self.s_base,
            v_source=self.v_source,
            edges=self.edges,
        )

    def to_json(self) -> dict:
        return {
            "node_count": self.node_count,
            "phases": list(self.phases),
            "edges": [
                {"phase": PHASES[e.phase], "from": e.parent, "to": e.child, "r_pu": e.r_pu, "x_pu": e.x_pu}
                for e in self.edges
            ],
            "loads_ref": {
                "p_mw": self.p_load_nom.tolist(),
                "q_mvar": self.q_load_nom.tolist(),
            },
            "s_base_mw": self.s_base,
            "v_source_pu": self.v_source,
        }


def _path_sensitivity(n: int, edges: list[Edge], attr: str) -> np.ndarray:
    """2 * A diag(z) A^T where A[i, e] = 1 iff edge e lies on the root path of i."""
    sens = np.zeros((3, n, n))
    for ph in range(3):
        ph_edges = [e for e in edges if e.phase == ph]
        parent = {e.child: e for e in ph_edges}
        incidence = np.zeros((n, len(ph_edges)))
        index = {id(e): k for k, e in enumerate(ph_edges)}
        for node in range(n):
            cur = node
            while cur in parent:
                e = parent[cur]
                incidence[node, index[id(e)]] = 1.0
                cur = e.parent
        z = np.array([getattr(e, attr) for e in ph_edges])
        sens[ph] = 2.0 * (incidence * z) @ incidence.T
    return sens


def _base_voltage(r_sens, x_sens, p_load, q_load, s_base, v_source):
    return v_source - np.einsum("pij,pj->pi", r_sens, p_load / s_base) - np.einsum(
        "pij,pj->pi", x_sens, q_load / s_base
    )


def _check_tree(n: int, edges: list[Edge]) -> None:
    for ph in range(3):
        children = [e.child for e in edges if e.phase == ph]
        if sorted(children) != list(range(1, n)):
            raise ValueError(f"phase {PHASES[ph]}: edges must form a tree rooted at node 0")
        parent = {e.child: e.parent for e in edges if e.phase == ph}
        for node in range(1, n):
            seen = set()
            cur = node
            while cur != 0:
                if cur in seen or cur not in parent:
                    raise ValueError(f"phase {PHASES[ph]}: node {node} is not connected to the root")
                seen.add(cur)
                cur = parent[cur]


def feeder_from_edges(
    node_count: int,
    edges: list[Edge],
    p_load_nom=None,
    q_load_nom=None,
    s_base: float = 1.0,
    v_source: float = 1.0,
) -> FeederModel:
    if node_count < 2:
        raise ValueError("node_count must be at least 2")
    if s_base <= 0:
        raise ValueError("s_base must be positive")
    _check_tree(node_count, edges)
    p = np.zeros((3, node_count)) if p_load_nom is None else np.asarray(p_load_nom, float).reshape(3, node_count)
    q = np.zeros((3, node_count)) if q_load_nom is None else np.asarray(q_load_nom, float).reshape(3, node_count)
    if np.any(p < 0):
        raise ValueError("nominal real load must be nonnegative")
    r_sens = _path_sensitivity(node_count, edges, "r_pu")
    x_sens = _path_sensitivity(node_count, edges, "x_pu")
    return FeederModel(
        node_count=node_count,
        r_sens=r_sens,
        x_sens=x_sens,
        base_voltage=_base_voltage(r_sens, x_sens, p, q, s_base, v_source),
        p_load_nom=p,
        q_load_nom=q,
        s_base=s_base,
        v_source=v_source,
        edges=tuple(edges),
    )


def build_synthetic_feeder(
    node_count: int,
    seed: int,
    impedance_scale: float = 0.01,
    *,
    s_base: float = 1.0,
    v_source: float = 1.0,
    branch_window: int = 3,
) -> FeederModel:
    """Random radial feeder with one tree per phase rooted at node 0.

    Each node i >= 1 attaches to a parent drawn from the ``branch_window``
    preceding nodes, which yields long laterals rather than a star. Line
    resistances and reactances are uniform in [0.2, 1.0] * impedance_scale.
    Nominal load is zero; use :meth:`FeederModel.with_nominal_load`.
    """
    if node_count < 2:
        raise ValueError("node_count must be at least 2")
    if impedance_scale <= 0:
        raise ValueError("impedance_scale must be positive")
    rng = np.random.default_rng(seed)
    edges = []
    for ph in range(3):
        for child in range(1, node_count):
            parent = int(rng.integers(max(0, child - branch_window), child))
            r, x = rng.uniform(0.2, 1.0, size=2) * impedance_scale
            edges.append(Edge(ph, parent, child, float(r), float(x)))
    return feeder_from_edges(node_count, edges, s_base=s_base, v_source=v_source)


def _as_phase_array(model: FeederModel, arr, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if a.shape != (3, model.node_count):
        raise ValueError(f"{name} has shape {a.shape}, expected (3, {model.node_count})")
    return a


def compute_voltages(model: FeederModel, p_inj, q_inj, p_load, q_load) -> np.ndarray:
    """Per-phase per-node voltage magnitude in p.u.

    Injections and loads are (3, n) arrays in MW / MVAr.
    """
    p_inj = _as_phase_array(model, p_inj, "p_inj")
    q_inj = _as_phase_array(model, q_inj, "q_inj")
    p_load = _as_phase_array(model, p_load, "p_load")
    q_load = _as_phase_array(model, q_load, "q_load")
    dp = (p_inj - (p_load - model.p_load_nom)) / model.s_base
    dq = (q_inj - (q_load - model.q_load_nom)) / model.s_base
    return (
        model.base_voltage
        + np.einsum("pij,pj->pi", model.r_sens, dp)
        + np.einsum("pij,pj->pi", model.x_sens, dq)
    )


def compute_feeder_head_power(model: FeederModel, p_inj, p_load) -> np.ndarray:
    """Lossless real-power balance per phase in MW; positive is import."""
    p_inj = _as_phase_array(model, p_inj, "p_inj")
    p_load = _as_phase_array(model, p_load, "p_load")
    return p_load.sum(axis=1) - p_inj.sum(axis=1)


def feeder_from_json(doc: dict, base_dir: Path | None = None) -> FeederModel:
    n = int(doc["node_count"])
    phases = tuple(doc.get("phases", PHASES))
    if phases != PHASES:
        raise ValueError(f"phases must be {list(PHASES)}")
    edges = [
        Edge(PHASES.index(e["phase"]), int(e["from"]), int(e["to"]), float(e["r_pu"]), float(e["x_pu"]))
        for e in doc["edges"]
    ]
    loads = doc.get("loads_ref")
    if isinstance(loads, str):
        path = Path(loads)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        loads = json.loads(path.read_text())
    p = q = None
    if loads is not None:
        p = np.array(loads["p_mw"], dtype=float)
        q = np.array(loads.get("q_mvar", np.zeros_like(p)), dtype=float)
    return feeder_from_edges(
        n, edges, p, q, s_base=float(doc.get("s_base_mw", 1.0)), v_source=float(doc.get("v_source_pu", 1.0))
    )


def load_feeder(path) -> FeederModel:
    path = Path(path)
    return feeder_from_json(json.loads(path.read_text()), base_dir=path.parent)
