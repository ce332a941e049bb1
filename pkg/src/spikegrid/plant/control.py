"""Virtual synchronous generator reference control and current limiting.

The VSG produces the modulation targets the network is trained to imitate:
a swing equation sets the internal angle, a Q-V droop (plus an optional
secondary correction) sets the voltage magnitude, and a proportional voltage
loop with filter-drop feedforward yields the terminal voltage command.
"""

from __future__ import annotations

import cmath
import logging
import math
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


@dataclass
class VsgParams:
    inertia_h: float = 0.5  # s
    damping: float = 20.0  # pu power per pu frequency
    tau_pq: float = 0.005  # power measurement filter, s
    droop_q: float = 0.05  # pu voltage per pu reactive power
    k_v: float = 0.0  # proportional voltage loop gain
    k_ff: float = 0.0  # filter-drop feedforward weight
    v_set: float = 1.0
    p_set: float = 0.0
    q_set: float = 0.0


@dataclass
class SecondaryParams:
    """Integral gains of the (communication-based) secondary layer, 1/s."""

    k_v: float = 5.0
    k_q: float = 5.0
    k_f: float = 20.0  # frequency restoration, pu power per pu frequency per s
    enabled: bool = True


@dataclass
class VsgState:
    delta: float = 0.0  # angle ahead of the nominal frame, rad
    omega: float = 1.0  # pu
    p_f: float = 0.0
    q_f: float = 0.0
    dv_sec: float = 0.0
    dp_sec: float = 0.0
    saturated: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.delta) and math.isfinite(self.omega)):
            raise ValueError("VSG state must be finite")


def frt_limit(i_ref: complex, i_max: float) -> complex:
    """Clamp the magnitude of a dq current reference, keeping its angle."""
    if not i_max > 0:
        raise ValueError("i_max must be positive")
    mag = abs(i_ref)
    if mag <= i_max:
        return i_ref
    return i_ref * (i_max / mag)


def vsg_reference(state: VsgState, v: complex, i: complex, p: VsgParams, dt: float,
                  omega_base: float, r_f: float, x_f: float, e_max: float,
                  i_limit: float | None = None) -> complex:
    """Advance the VSG by ``dt`` and return the modulation phasor.

    ``v`` is the filter-capacitor voltage and ``i`` the filter current, both
    complex in the nominal frame. The returned phasor ``m`` (|m| <= 1) gives
    phase modulations ``Re(m exp(j(theta_nom - 2 pi k/3)))``. When ``i_limit``
    is set the voltage command is pulled back so the quasi-steady filter
    current stays within it.
    """
    s = v * i.conjugate()
    state.p_f += (dt / p.tau_pq) * (s.real - state.p_f)
    state.q_f += (dt / p.tau_pq) * (s.imag - state.q_f)
    state.omega += dt / (2.0 * p.inertia_h) * (p.p_set + state.dp_sec - state.p_f - p.damping * (state.omega - 1.0))
    state.delta += omega_base * (state.omega - 1.0) * dt
    mag = p.v_set - p.droop_q * (state.q_f - p.q_set) + state.dv_sec
    v_ref = mag * cmath.exp(1j * state.delta)
    z_f = complex(r_f, x_f)
    e_cmd = v_ref + p.k_v * (v_ref - v) + p.k_ff * z_f * i
    if i_limit is not None:
        i_pred = i + (e_cmd - v - z_f * i) / z_f
        i_lim = frt_limit(i_pred, i_limit)
        if i_lim != i_pred:
            e_cmd = v + z_f * i_lim
    m = e_cmd / e_max
    if abs(m) > 1.0:
        state.saturated += 1
        logger.debug("modulation saturated (|m|=%.3f)", abs(m))
        m /= abs(m)
    return m


def secondary_update(states: list[VsgState], v_mags: list[float], q: list[float],
                     ratings: list[float], sp: SecondaryParams, dt: float,
                     v_nom: float = 1.0) -> None:
    """Average-voltage, reactive-sharing and frequency correction from global averages."""
    if not sp.enabled or not states:
        return
    v_avg = sum(v_mags) / len(v_mags)
    q_pu = [qk / rk for qk, rk in zip(q, ratings)]
    q_avg = sum(q_pu) / len(q_pu)
    w_avg = sum(st.omega for st in states) / len(states)
    for st, qk, rk in zip(states, q_pu, ratings):
        st.dv_sec += dt * (sp.k_v * (v_nom - v_avg) + sp.k_q * (q_avg - qk))
        st.dp_sec += dt * sp.k_f * rk * (1.0 - w_avg)
