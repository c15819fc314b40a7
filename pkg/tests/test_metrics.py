from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermscomm import metrics
from dermscomm.controller import GridServiceBounds, step_setpoint
from dermscomm.engine import Trace, TraceRecord
from dermscomm.metrics import (
    BaselineBroken,
    Campaign,
    Experiment,
    FunctionalityMetric,
    SearchRange,
    campaign_from_json,
    find_limit,
    functional_fraction,
    is_functional,
    limit_for,
    run_campaign,
    trial_seed,
)
from dermscomm.scenario import ConfigError, FaultSpec, MetricSpec, default_scenario

SP = (0.5, 0.4, 0.3)
BOUNDS = GridServiceBounds(0.95, 1.03, step_setpoint(SP, SP, 0.0), 0.01)


def fake_trace(n=200, dt=2.0, td=0.0, vmin=1.0, vmax=1.0, p0=SP):
    vmin = np.broadcast_to(vmin, n)
    vmax = np.broadcast_to(vmax, n)
    p0 = np.broadcast_to(np.asarray(p0, float), (n, 3))
    recs = [
        TraceRecord(k * dt, float(vmin[k]), float(vmax[k]), tuple(map(float, p0[k])), 0.0, 0.0, 0, 0, 0, SP, None)
        for k in range(n)
    ]
    return Trace(recs, BOUNDS, td)


M = FunctionalityMetric(duration=300.0, tol_v=0.002, tol_p=0.02, window=60.0)


def test_metric_validation():
    with pytest.raises(ValueError):
        FunctionalityMetric(duration=60.0, window=60.0)
    with pytest.raises(ValueError):
        FunctionalityMetric(tol_v=-1.0)


def test_inside_raw_bounds_is_functional():
    v = is_functional(fake_trace(), M)
    assert v.functional and v.first_satisfied == 0.0


def test_voltage_above_widened_bound_fails():
    assert not is_functional(fake_trace(vmax=1.04), M)
    assert is_functional(fake_trace(vmax=1.03 + 0.002), M)


def test_vpp_boundary_inclusive():
    assert is_functional(fake_trace(p0=(SP[0] + 0.029, SP[1], SP[2])), M)
    edge = SP[0] + (0.01 + 0.02)
    assert is_functional(fake_trace(p0=(edge, SP[1], SP[2])), M)
    assert not is_functional(fake_trace(p0=(np.nextafter(edge, 1.0), SP[1], SP[2])), M)
    assert not is_functional(fake_trace(p0=(SP[0], SP[1] - 0.031, SP[2])), M)


def test_only_the_final_window_counts():
    n = 200
    vmax = np.full(n, 1.0)
    vmax[:100] = 1.1  # violated until t = 198
    v = is_functional(fake_trace(vmax=vmax), M)
    assert v.functional and v.first_satisfied == 200.0
    vmax[145] = 1.1  # t = 290, inside the window [240, 300]
    assert not is_functional(fake_trace(vmax=vmax), M)
    vmax[145] = 1.0
    vmax[160] = 1.1  # t = 320, after the window
    assert is_functional(fake_trace(vmax=vmax), M)


def test_short_trace_rejected():
    with pytest.raises(ValueError):
        is_functional(fake_trace(n=100), M)
    with pytest.raises(ValueError):
        is_functional(fake_trace(), M, disturbance_time=-10.0)


@settings(max_examples=100, deadline=None)
@given(
    noise=st.lists(st.floats(-0.06, 0.06), min_size=200, max_size=200),
    tol=st.floats(0.0, 0.03),
    extra=st.floats(0.0, 0.05),
)
def test_widening_nests(noise, tol, extra):
    n = np.asarray(noise)
    tr = fake_trace(vmin=1.0 + n, vmax=1.0 + n, p0=np.array(SP) + n[:, None] / 2)
    tight = FunctionalityMetric(300.0, tol, tol, 60.0)
    loose = FunctionalityMetric(300.0, tol + extra, tol + extra, 60.0)
    if is_functional(tr, tight):
        assert is_functional(tr, loose)


# ---------------------------------------------------------------- limit search


def test_step_predicate_bracket():
    r = find_limit(lambda s, fam: s < 0.37, 0.0, 1.0, 0.01)
    assert r.bracket_lo < 0.37 <= r.bracket_hi
    assert r.bracket_hi - r.bracket_lo <= 0.01
    assert not r.unbounded and not r.warnings


def test_ends_are_rechecked_with_fresh_families():
    calls = []

    def pred(s, fam):
        calls.append((s, fam))
        return s < 0.37

    r = find_limit(pred, 0.0, 1.0, 0.01)
    fams = {fam for s, fam in calls if s in (r.bracket_lo, r.bracket_hi)}
    assert fams - {0}


def test_functional_at_hi_is_unbounded():
    r = find_limit(lambda s, fam: True, 0.0, 1.0, 0.01)
    assert r.unbounded and r.limit == 1.0


def test_nonfunctional_at_lo_is_baseline_broken():
    with pytest.raises(BaselineBroken):
        find_limit(lambda s, fam: False, 0.0, 1.0, 0.01)


def test_flaky_predicate_reopens_and_warns():
    # family 0 says the limit is 0.6; every other family says 0.3
    def pred(s, fam):
        return s < (0.6 if fam == 0 else 0.3)

    r = find_limit(pred, 0.0, 1.0, 0.01)
    assert r.warnings
    assert r.bracket_lo < 0.3 <= r.bracket_hi
    assert r.bracket_hi - r.bracket_lo <= 0.01


def test_bad_search_arguments():
    with pytest.raises(ValueError):
        find_limit(lambda s, f: True, 1.0, 0.0, 0.01)
    with pytest.raises(ValueError):
        find_limit(lambda s, f: True, 0.0, 1.0, 0.0)


def test_trial_seeds_distinct():
    seeds = {trial_seed(0, fam, k) for fam in range(3) for k in range(10)}
    assert len(seeds) == 30
    assert trial_seed(5, 1, 2) == trial_seed(5, 1, 2)


# ---------------------------------------------------------------- real runs


@pytest.fixture(scope="module")
def short():
    return replace(
        default_scenario(),
        horizon=1500.0,
        disturbance_time=600.0,
        metric=MetricSpec(duration_s=900.0),
    )


def test_deterministic_fault_runs_once(short, monkeypatch):
    calls = []
    orig = metrics._run_trial

    def counting(args):
        calls.append(1)
        return orig(args)

    monkeypatch.setattr(metrics, "_run_trial", counting)
    res = functional_fraction(short, FaultSpec("der_link", "delay", latency_s=4.0), 7)
    assert len(calls) == 1
    assert res.fraction in (0.0, 1.0) and len(res.verdicts) == 7


def test_zero_drop_is_baseline(short):
    res = functional_fraction(short, FaultSpec("der_link", "packet_loss", p_drop=0.0), 3)
    assert res.fraction == 1.0


def test_fraction_ignores_trial_order(short):
    fault = FaultSpec("direction_signal", "packet_loss", p_drop=0.7)
    seeds = [trial_seed(0, 0, k) for k in range(4)]
    a = functional_fraction(short, fault, 4, seeds)
    b = functional_fraction(short, fault, 4, seeds[::-1])
    assert a.fraction == b.fraction
    assert a.verdicts == b.verdicts[::-1]


def test_more_loss_is_no_better(short):
    seeds = [trial_seed(3, 0, k) for k in range(10)]
    low = functional_fraction(short, FaultSpec("der_link", "packet_loss", p_drop=0.01), 10, seeds)
    high = functional_fraction(short, FaultSpec("der_link", "packet_loss", p_drop=0.9), 10, seeds)
    assert low.fraction >= high.fraction


def test_no_faulty_channel_is_unbounded(short):
    exp = Experiment(short, "packet_loss", "voltage", 0.0)
    r = limit_for(exp, SearchRange(0.0, 1.0, 0.05), trials=3)
    assert r.unbounded and r.limit == 1.0 and r.evaluations == 2


def test_campaign_points_and_empty_grid(short):
    c = Campaign(short, "delay", metrics.DELAY_CATEGORIES)
    assert len(c.points()) == 5
    assert run_campaign(Campaign(short, "packet_loss", ("voltage",), grid=())) == []
    lf = campaign_from_json({"experiment": "link_failure"})
    assert sorted({e.secondary for e in lf.points()}) == [60.0, 120.0, 300.0, 600.0, 1200.0]


def test_failed_point_is_recorded(short):
    c = Campaign(short, "delay", ("setpoint",), search=SearchRange(900.0, 1000.0, 50.0), trials=2)
    (row,) = run_campaign(c)
    assert row.status == "baseline_broken" and row.result is None and row.error


def test_campaign_table_is_deterministic(short):
    c = Campaign(short, "delay", ("feeder_head",), search=SearchRange(0.0, 40.0, 10.0))
    a = run_campaign(c)
    b = run_campaign(c)
    assert a == b
    assert a[0].result is not None


def test_campaign_config_errors():
    with pytest.raises(ConfigError):
        campaign_from_json({"experiment": "earthquake"})
    with pytest.raises(ConfigError):
        campaign_from_json({"experiment": "packet_loss", "grid": [0.5, 2.0]})
    with pytest.raises(ConfigError):
        campaign_from_json({"experiment": "delay", "category": "bogus"})
    with pytest.raises(ConfigError):
        campaign_from_json({"experiment": "delay", "search": {"lo": 5, "hi": 1, "resolution": 1}})
