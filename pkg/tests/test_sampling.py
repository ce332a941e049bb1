import numpy as np
import pytest
from hypothesis import given, strategies as st

from spikegrid.sampling import (
    EventThresholds, SemanticSampler, gate_trace, read_event_log, write_event_log,
)
from spikegrid.signals import DqSample


def oracle_gate(x, n_w, th, holdoff=0):
    """Brute-force gate: np.var on explicit slices, no incremental state."""
    ths = np.array([th.sigma_v, th.sigma_v, th.sigma_i, th.sigma_i])
    active = np.zeros(len(x), dtype=bool)
    on, quiet = False, 0
    for m in range(len(x)):
        if m >= n_w:
            omega = bool(np.any(np.var(x[m - n_w: m], axis=0) > ths))
        else:
            omega = False
        if not on and omega:
            on, quiet = True, 0
        elif on:
            if omega:
                quiet = 0
            else:
                quiet += 1
                if quiet > holdoff:
                    on = False
        active[m] = on
    return active


def step_trace(n, at, lo, hi, ch=2):
    x = np.zeros((n, 4))
    x[:, 0] = 1.0
    x[:, ch] = lo
    x[at:, ch] = hi
    return x


def test_single_step_opens_one_event():
    x = step_trace(30000, 15000, 0.45, 0.9)
    active, events = gate_trace(x, 1e-5, 4000, EventThresholds(0.15, 0.05))
    assert len(events) == 1
    ev = events[0]
    assert ev.trigger_mask == 0b0100
    assert ev.n_forwarded == active.sum()
    assert np.array_equal(active, oracle_gate(x, 4000, EventThresholds(0.15, 0.05)))


def test_constant_trace_never_fires():
    x = np.tile([1.0, 0.0, 0.5, 0.0], (5000, 1))
    active, events = gate_trace(x, 1e-5, 100)
    assert not events and not active.any()


def test_threshold_is_strict():
    # a two-level window at equal split has variance (a/2)^2 exactly
    n_w = 4
    x = np.zeros((12, 4))
    x[:, 0] = 1.0
    x[6:, 2] = 0.2  # window [0,0,0.2,0.2] has variance 0.01
    th = EventThresholds(1.0, 0.01)
    active, _ = gate_trace(x, 1e-5, n_w, th)
    assert np.array_equal(active, oracle_gate(x, n_w, th))


@given(st.integers(0, 2**32 - 1), st.integers(4, 40), st.integers(0, 5))
def test_gate_matches_oracle_on_random_bursts(seed, n_w, holdoff):
    rng = np.random.default_rng(seed)
    n = 400
    x = np.zeros((n, 4))
    x[:, 0] = 1.0
    for _ in range(rng.integers(0, 4)):
        a = rng.integers(0, n - 10)
        b = a + rng.integers(1, 60)
        x[a:b, rng.integers(0, 4)] += rng.normal(0, 0.5, min(b, n) - a)
    th = EventThresholds(float(rng.uniform(0.001, 0.05)), float(rng.uniform(0.001, 0.05)))
    active, events = gate_trace(x, 1e-5, n_w, th, holdoff)
    assert np.array_equal(active, oracle_gate(x, n_w, th, holdoff))
    assert sum(e.n_forwarded for e in events) == active.sum()
    for e in events:
        end = e.m_end if e.m_end is not None else n
        assert active[e.m_start: end].all()


@given(st.integers(0, 2**32 - 1), st.integers(4, 30))
def test_scan_idle_equals_stepping(seed, n_w):
    rng = np.random.default_rng(seed)
    th = EventThresholds(0.01, 0.01)
    warm = np.tile([1.0, 0.0, 0.3, 0.0], (n_w, 1)) + rng.normal(0, 0.01, (n_w, 4))
    block = np.tile([1.0, 0.0, 0.3, 0.0], (200, 1)) + rng.normal(0, 0.01, (200, 4))
    block[rng.integers(0, 200):, 2] += rng.uniform(0, 0.5)

    a = SemanticSampler(n_w, th, 0, 1e-5)
    for m, r in enumerate(warm):
        a.step(DqSample(*r, m * 1e-5))
    if a.active:
        return
    b = SemanticSampler(n_w, th, 0, 1e-5)
    for m, r in enumerate(warm):
        b.step(DqSample(*r, m * 1e-5))

    k = a.scan_idle(block)
    opened = len(block)
    for j, r in enumerate(block):
        b.step(DqSample(*r, (n_w + j) * 1e-5))
        if b.active:
            opened = j
            break
    assert k == opened
    a.advance_idle(block[:k])
    assert a.m == n_w + k and not a.active
    c = SemanticSampler(n_w, th, 0, 1e-5)
    for m, r in enumerate(np.vstack([warm, block[:k]])):
        c.step(DqSample(*r, m * 1e-5))
    for wa, wc in zip(a.windows, c.windows):
        assert np.allclose(wa.values(), wc.values())
        assert wa.variance == pytest.approx(wc.variance, abs=1e-12)


def test_holdoff_bridges_short_lulls():
    x = np.zeros((3000, 4))
    x[:, 0] = 1.0
    x[1000:1010, 3] = 0.5
    x[1100:1110, 3] = -0.5
    th = EventThresholds(1.0, 1e-3)
    _, ev0 = gate_trace(x, 1e-5, 50, th, holdoff=0)
    _, ev1 = gate_trace(x, 1e-5, 50, th, holdoff=200)
    assert len(ev0) >= 2
    assert len(ev1) == 1


def test_gate_idle_until_windows_full():
    x = np.random.default_rng(0).normal(0, 1, (50, 4))
    active, _ = gate_trace(x, 1e-5, 60)
    assert not active.any()


def test_event_log_round_trip(tmp_path):
    x = step_trace(3000, 1500, 0.0, 1.0)
    _, events = gate_trace(x, 1e-5, 200, EventThresholds(0.15, 0.05))
    p = tmp_path / "events.csv"
    write_event_log(events, p)
    rows = read_event_log(p)
    assert len(rows) == len(events)
    for r, e in zip(rows, events):
        assert r["t_start"] == pytest.approx(e.t_start, abs=1e-6)
        assert r["n_samples_forwarded"] == e.n_forwarded
        assert r["trigger_channel_mask"] == e.trigger_mask


def test_thresholds_validated():
    with pytest.raises(ValueError):
        EventThresholds(0.0, 0.1)
