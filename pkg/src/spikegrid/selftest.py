"""Fast consistency checks behind ``spikegrid selftest`` (a few seconds)."""

from __future__ import annotations

import math

import numpy as np

from .codec import decode, period_duties
from .energy import table1_rows
from .sampling import EventThresholds, gate_trace
from .signals import CarrierSpec, abc_to_phasor, carrier_samples, phasor_to_abc
from .snn.lif import LifParams, lif_run
from .snn.network import SnnModel


def _table1():
    worst = 0.0
    for r in table1_rows():
        for key in ("P_on", "P_off"):
            ref = r[f"{key}_published"]
            err = abs(r[key] - ref) / ref if ref else abs(r[key])
            worst = max(worst, err)
    return worst <= 0.005, f"worst relative power error {worst:.2e}"


def _park():
    rng = np.random.default_rng(1)
    x = rng.normal(size=50) + 1j * rng.normal(size=50)
    th = rng.uniform(0, 2 * math.pi, 50)
    back = np.array([abc_to_phasor(phasor_to_abc(xk, tk), tk) for xk, tk in zip(x, th)])
    err = float(np.max(np.abs(back - x)))
    return err < 1e-12, f"round-trip error {err:.1e}"


def _spwm():
    spec = CarrierSpec(1e-4)
    dt = 1e-6
    worst = 0.0
    for u in (-1.0, -0.5, 0.0, 0.5, 1.0):
        out = decode(np.full((3, 1000), u), dt, spec)
        d = period_duties(out.spikes.bits, spec.steps_per_period(dt))
        worst = max(worst, float(np.max(np.abs(d - (u + 1) / 2))))
    rng = np.random.default_rng(2)
    u = rng.uniform(-1.2, 1.2, (3, 500))
    c = carrier_samples(500, dt, spec)
    same = np.array_equal(decode(u, dt, spec).spikes.bits, u > c)
    step = dt / spec.period
    return same and worst <= step + 1e-12, f"duty error {worst:.3f} (step {step:.3f}), comparator match {same}"


def _lif():
    p = LifParams(tau_m=1e-3, dt=1e-5, v_rest=0.0, v_reset=0.0)
    v0 = 0.9
    vs, spikes = lif_run(np.zeros(200), p, v0=v0)
    ref = v0 * (1 - p.beta) ** np.arange(1, 201)
    err = float(np.max(np.abs(vs - ref)))
    return err < 1e-12 and not spikes, f"zero-input decay error {err:.1e}"


def _gate():
    dt, n_w = 1e-5, 4000
    n = 30000
    x = np.zeros((n, 4))
    x[:, 0] = 1.0
    x[:, 2] = 0.45
    x[15000:, 2] = 0.9
    _, events = gate_trace(x, dt, n_w, EventThresholds(0.15, 0.05))
    ok = len(events) == 1 and 15000 <= events[0].m_start <= 15000 + n_w
    return ok, f"{len(events)} event(s)" + (f", onset at sample {events[0].m_start}" if events else "")


def _gradient():
    rng = np.random.default_rng(3)
    model = SnnModel.build(sizes=(2, 4, 1), dt=1e-4, tau_m=2e-3, seed=4, init="normal")
    model.weights[-1] = rng.normal(0, 0.5, model.weights[-1].shape)
    x = (rng.random((1, 60, 2)) < 0.3).astype(float)
    y = rng.normal(0, 0.1, (1, 60, 1))
    _, grads, _ = model.gradients(x, y, soft=True)
    w = model.weights[-1]
    h = 1e-6
    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        w[idx] += h
        lp = model.loss(x, y, soft=True)
        w[idx] -= 2 * h
        lm = model.loss(x, y, soft=True)
        w[idx] += h
        num[idx] = (lp - lm) / (2 * h)
    rel = float(np.max(np.abs(num - grads[-1]) / np.maximum(np.abs(num), 1e-8)))
    return rel < 1e-3, f"readout gradient relative error {rel:.1e}"


CHECKS = {
    "table1_powers": _table1,
    "park_round_trip": _park,
    "spwm_decoder": _spwm,
    "lif_decay": _lif,
    "event_gate": _gate,
    "readout_gradient": _gradient,
}


def run_checks() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append((name, bool(ok), detail))
    return out
