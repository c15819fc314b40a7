from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermscomm.network import (
    Edge,
    build_synthetic_feeder,
    compute_feeder_head_power,
    compute_voltages,
    feeder_from_edges,
    feeder_from_json,
)


def _ancestors(edges, phase, node):
    parent = {e.child: e for e in edges if e.phase == phase}
    out = {}
    while node in parent:
        e = parent[node]
        out[(e.parent, e.child)] = e
        node = e.parent
    return out


def _lca_sensitivity(model, attr):
    # brute force: twice the impedance summed over edges shared by both root paths
    n = model.node_count
    sens = np.zeros((3, n, n))
    for ph in range(3):
        paths = [_ancestors(model.edges, ph, i) for i in range(n)]
        for i in range(n):
            for j in range(n):
                shared = paths[i].keys() & paths[j].keys()
                sens[ph, i, j] = 2.0 * sum(getattr(paths[i][k], attr) for k in shared)
    return sens


def test_two_node_feeder_sensitivity():
    r = 0.013
    edges = [Edge(ph, 0, 1, r, 0.5 * r) for ph in range(3)]
    m = feeder_from_edges(2, edges)
    for ph in range(3):
        np.testing.assert_array_equal(m.r_sens[ph], [[0.0, 0.0], [0.0, 2 * r]])
        np.testing.assert_array_equal(m.x_sens[ph], [[0.0, 0.0], [0.0, r]])


def test_same_seed_same_feeder():
    a = build_synthetic_feeder(40, seed=3)
    b = build_synthetic_feeder(40, seed=3)
    np.testing.assert_array_equal(a.r_sens, b.r_sens)
    np.testing.assert_array_equal(a.x_sens, b.x_sens)
    assert a.edges == b.edges
    c = build_synthetic_feeder(40, seed=4)
    assert not np.array_equal(a.r_sens, c.r_sens)


def test_sensitivity_symmetric_psd():
    m = build_synthetic_feeder(50, seed=7)
    for sens in (m.r_sens, m.x_sens):
        for ph in range(3):
            s = sens[ph]
            np.testing.assert_array_equal(s, s.T)
            eig = np.linalg.eigvalsh(s)
            assert eig.min() > -1e-12 * max(1.0, eig.max())


def test_sensitivity_matches_lca_oracle():
    m = build_synthetic_feeder(25, seed=11)
    np.testing.assert_allclose(m.r_sens, _lca_sensitivity(m, "r_pu"), rtol=0, atol=1e-15)
    np.testing.assert_allclose(m.x_sens, _lca_sensitivity(m, "x_pu"), rtol=0, atol=1e-15)


def test_sensitivity_nonnegative():
    m = build_synthetic_feeder(60, seed=2)
    assert (m.r_sens >= 0).all() and (m.x_sens >= 0).all()


def test_zero_injection_nominal_load_gives_base_voltage():
    m = build_synthetic_feeder(20, seed=1)
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 0.05, (3, 20))
    m = m.with_nominal_load(p, 0.3 * p)
    z = np.zeros((3, 20))
    v = compute_voltages(m, z, z, m.p_load_nom, m.q_load_nom)
    np.testing.assert_array_equal(v, m.base_voltage)


def test_two_node_single_term_voltage():
    # r_sens[1][1] = 0.02, so 0.5 p.u. of injection raises v1 by 0.01
    edges = [Edge(ph, 0, 1, 0.01, 0.01) for ph in range(3)]
    m = feeder_from_edges(2, edges)
    p = np.zeros((3, 2))
    p[0, 1] = 0.5
    z = np.zeros((3, 2))
    v = compute_voltages(m, p, z, z, z)
    assert v[0, 1] == pytest.approx(m.base_voltage[0, 1] + 0.01, abs=1e-15)
    assert v[1, 1] == m.base_voltage[1, 1]


def test_superposition():
    n = 20
    m = build_synthetic_feeder(n, seed=5)
    rng = np.random.default_rng(1)
    load_p, load_q = rng.uniform(0, 0.05, (2, 3, n))
    m = m.with_nominal_load(load_p, load_q)
    p1, q1, p2, q2 = rng.normal(0, 0.02, (4, 3, n))
    base = compute_voltages(m, 0 * p1, 0 * q1, load_p, load_q)
    d1 = compute_voltages(m, p1, q1, load_p, load_q) - base
    d2 = compute_voltages(m, p2, q2, load_p, load_q) - base
    d12 = compute_voltages(m, p1 + p2, q1 + q2, load_p, load_q) - base
    np.testing.assert_allclose(d12, d1 + d2, rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    node=st.integers(1, 29),
    phase=st.integers(0, 2),
    dp=st.floats(1e-6, 0.1),
)
def test_more_injection_never_lowers_voltage_or_raises_import(seed, node, phase, dp):
    n = 30
    m = build_synthetic_feeder(n, seed=seed)
    rng = np.random.default_rng(seed)
    p = rng.normal(0, 0.01, (3, n))
    q = rng.normal(0, 0.01, (3, n))
    load = rng.uniform(0, 0.02, (3, n))
    v0 = compute_voltages(m, p, q, load, 0 * load)
    h0 = compute_feeder_head_power(m, p, load)
    p2 = p.copy()
    p2[phase, node] += dp
    v1 = compute_voltages(m, p2, q, load, 0 * load)
    h1 = compute_feeder_head_power(m, p2, load)
    assert (v1[phase] >= v0[phase] - 1e-15).all()
    assert h1[phase] <= h0[phase]
    others = [k for k in range(3) if k != phase]
    np.testing.assert_array_equal(v1[others], v0[others])


def test_feeder_head_power_examples():
    m = build_synthetic_feeder(5, seed=0)
    z = np.zeros((3, 5))
    load = np.zeros((3, 5))
    load[0, 1:] = [0.3, 0.3, 0.4, 0.2]
    assert compute_feeder_head_power(m, z, load)[0] == pytest.approx(1.2, abs=1e-15)
    np.testing.assert_array_equal(compute_feeder_head_power(m, load, load), 0.0)


def test_feeder_head_power_against_loop_sum():
    m = build_synthetic_feeder(12, seed=9)
    rng = np.random.default_rng(4)
    p = rng.normal(0, 0.1, (3, 12))
    load = rng.uniform(0, 0.2, (3, 12))
    want = []
    for ph in range(3):
        tot = 0.0
        for i in range(12):
            tot += load[ph, i] - p[ph, i]
        want.append(tot)
    np.testing.assert_allclose(compute_feeder_head_power(m, p, load), want, rtol=0, atol=1e-12)


def test_shape_mismatch_rejected():
    m = build_synthetic_feeder(6, seed=0)
    with pytest.raises(ValueError):
        compute_voltages(m, np.zeros((3, 5)), np.zeros((3, 6)), np.zeros((3, 6)), np.zeros((3, 6)))


def test_invalid_feeders_rejected():
    with pytest.raises(ValueError):
        build_synthetic_feeder(1, seed=0)
    # node 2 missing from phase C
    edges = [Edge(ph, 0, 1, 0.01, 0.01) for ph in range(3)] + [Edge(ph, 1, 2, 0.01, 0.01) for ph in range(2)]
    with pytest.raises(ValueError):
        feeder_from_edges(3, edges)


def test_json_round_trip(tmp_path):
    m = build_synthetic_feeder(15, seed=8)
    m = m.with_nominal_load(np.full((3, 15), 0.01), np.full((3, 15), 0.002))
    doc = json.loads(json.dumps(m.to_json()))
    back = feeder_from_json(doc)
    np.testing.assert_array_equal(back.r_sens, m.r_sens)
    np.testing.assert_array_equal(back.base_voltage, m.base_voltage)

    loads = doc.pop("loads_ref")
    (tmp_path / "loads.json").write_text(json.dumps(loads))
    doc["loads_ref"] = "loads.json"
    again = feeder_from_json(doc, base_dir=tmp_path)
    np.testing.assert_array_equal(again.base_voltage, m.base_voltage)
