from __future__ import annotations

import copy
import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermscomm.comm import (
    Category,
    Channel,
    Delay,
    LinkFailure,
    MessageQueue,
    PacketLoss,
    Transport,
    resolve_categories,
    select_faulty_channels,
    send,
)
from dermscomm.controller import DirectionSignal, GridMeasurement, PQMeasurement, Setpoint


def _v(t=0.0):
    return GridMeasurement(t, "voltage", 0, 1.0, 3)


def _chan(fault=None, seed=0, cid="v_0_3"):
    return Channel(cid, Category.VOLTAGE, "s", "c", fault, seed)


def binomial_two_sided_tail(n: int, p: float, lo: int, hi: int) -> float:
    """P(X < lo) + P(X > hi) for X ~ Binomial(n, p), summed exactly in log space."""
    def pmf(k):
        return math.exp(
            math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1) + k * math.log(p) + (n - k) * math.log1p(-p)
        )

    return sum(pmf(k) for k in range(0, lo)) + sum(pmf(k) for k in range(hi + 1, n + 1))


def test_no_fault_and_zero_drop_deliver_now():
    for fault in (None, PacketLoss(0.0)):
        ch = _chan(fault)
        assert all(send(ch, _v(t), t) == t for t in np.arange(0, 100, 2.0))


def test_full_drop_drops_everything():
    ch = _chan(PacketLoss(1.0))
    assert all(send(ch, _v(t), t) is None for t in range(100))


def test_half_drop_fraction():
    n = 10_000
    # the acceptance band is about six standard deviations wide
    assert binomial_two_sided_tail(n, 0.5, 4700, 5300) < 1e-8
    for seed in range(5):
        ch = _chan(PacketLoss(0.5), seed=seed)
        got = sum(send(ch, _v(), 0.0) is not None for _ in range(n))
        assert 0.47 <= got / n <= 0.53


def test_link_failure_certain_pattern():
    d = 30.0
    ch = _chan(LinkFailure(1.0, d))
    out = [(t, send(ch, _v(t), t)) for t in np.arange(0.0, 200.0, 2.0)]
    delivered = [t for t, at in out if at is not None]
    # one delivery, then down for exactly d seconds, repeating
    assert delivered == [0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0]


def test_link_failure_no_delivery_inside_downtime():
    ch = _chan(LinkFailure(0.3, 17.0), seed=4)
    fail_at = None
    for t in np.arange(0.0, 2000.0, 1.0):
        was_down = ch.is_down(t)
        at = send(ch, _v(t), t)
        if was_down:
            assert at is None
            assert fail_at is not None and fail_at < t < fail_at + 17.0
        if ch.down_until > t and not was_down:
            fail_at = t


def test_delay_exact_and_payload_preserved():
    sig = DirectionSignal("pv001", 0.123456789, -1e-17, 60.0)
    ch = Channel("dir", Category.DIRECTION, "c", "lc", Delay(80.0))
    tr = Transport()
    tr.add(ch)
    before = pickle.dumps(sig)
    msg = tr.send("dir", sig, 60.0)
    assert msg.deliver_at - msg.created_at == 80.0
    assert tr.deliver_due(139.999) == []
    (got,) = tr.deliver_due(140.0)
    assert pickle.dumps(got.payload) == before


def test_payload_category_mismatch():
    ch = _chan()
    with pytest.raises(ValueError):
        send(ch, Setpoint("x", 1.0, 0.0, 0.0), 0.0)
    sp = Channel("sp", Category.SETPOINT, "lc", "x")
    with pytest.raises(ValueError):
        send(sp, PQMeasurement("x", 1.0, 0.0, 0.0), 0.0)


def test_per_channel_streams_are_isolated():
    def draws(other_fault):
        a = _chan(PacketLoss(0.5), seed=1, cid="v_0_3")
        b = _chan(other_fault, seed=1, cid="v_0_4")
        res = []
        for t in range(500):
            res.append(send(a, _v(t), float(t)))
            send(b, _v(t), float(t))
        return res

    base = draws(PacketLoss(0.2))
    assert draws(PacketLoss(0.9)) == base
    assert draws(LinkFailure(0.5, 10.0)) == base
    assert draws(None) == base


def test_queue_empty_and_tie_order():
    q = MessageQueue()
    assert q.deliver_due(1e9) == []
    a = q.push("a", "first", 0.0, 5.0)
    b = q.push("b", "second", 1.0, 5.0)
    assert q.deliver_due(5.0) == [a, b]


@settings(max_examples=60, deadline=None)
@given(
    lat=st.lists(st.floats(0, 50, allow_nan=False), min_size=0, max_size=60),
    now=st.floats(0, 60, allow_nan=False),
)
def test_queue_matches_linear_scan(lat, now):
    q = MessageQueue()
    msgs = [q.push(f"c{i}", i, 0.0, x) for i, x in enumerate(lat)]
    shadow = copy.copy(msgs)
    got = q.deliver_due(now)
    want = sorted((m for m in shadow if m.deliver_at <= now), key=lambda m: (m.deliver_at, m.seq))
    assert [m.seq for m in got] == [m.seq for m in want]
    assert all(m.deliver_at > now for m in q.pending())
    assert len(q) == len(lat) - len(got)


def test_select_faulty_channels():
    ids = [f"c{i:03d}" for i in range(100)]
    assert select_faulty_channels(ids, 0.0, 1) == []
    assert select_faulty_channels(ids, 1.0, 1) == sorted(ids)
    half = select_faulty_channels(ids, 0.5, 9)
    assert len(half) == 50 and half == select_faulty_channels(list(reversed(ids)), 0.5, 9)
    # round half up
    assert len(select_faulty_channels(ids[:5], 0.5, 0)) == 3
    assert len(select_faulty_channels(ids[:3], 1 / 3, 0)) == 1


def test_resolve_categories():
    assert resolve_categories("grid_service") == {Category.VOLTAGE, Category.FEEDER_HEAD}
    assert resolve_categories("der_link", "measurement") == {Category.PQ_MEASUREMENT}
    assert resolve_categories("direction") == {Category.DIRECTION}
    with pytest.raises(ValueError):
        resolve_categories("der_link", "voltage")
    with pytest.raises(ValueError):
        resolve_categories("bogus")


def test_fault_parameter_validation():
    with pytest.raises(ValueError):
        PacketLoss(1.5)
    with pytest.raises(ValueError):
        LinkFailure(0.5, -1.0)
    with pytest.raises(ValueError):
        Delay(-0.1)


def test_transport_counters():
    tr = Transport()
    tr.add(_chan(PacketLoss(1.0), cid="v1"))
    tr.add(Channel("p0", Category.FEEDER_HEAD, "m", "c"))
    tr.send("v1", _v(), 0.0)
    tr.send("p0", GridMeasurement(0.0, "feeder_head", 0, 1.0), 0.0)
    tr.deliver_due(0.0)
    assert tr.totals() == (2, 1, 1)
    with pytest.raises(ValueError):
        tr.add(Channel("p0", Category.FEEDER_HEAD, "m", "c"))
