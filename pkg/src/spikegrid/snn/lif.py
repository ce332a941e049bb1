"""Leaky integrate-and-fire numerics and the switched-RC equivalent."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LifParams:
    """Forward-Euler LIF neuron.

    ``v_rest`` defaults to 0. Setting ``v_rest = v_th`` reproduces the variant
    in which the membrane leaks toward the threshold itself.
    """

    tau_m: float = 1e-3
    v_th: float = 1.0
    g_l: float = 1.0
    v_rest: float = 0.0
    v_reset: float = 0.0
    dt: float = 1e-5

    def __post_init__(self):
        if not self.tau_m > 0:
            raise ConfigError("tau_m must be positive")
        if not self.g_l > 0:
            raise ConfigError("g_l must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.dt < self.tau_m / 5.0:
            raise ConfigError(f"dt={self.dt} violates dt < tau_m/5 (tau_m={self.tau_m})")
        if self.v_reset > self.v_th:
            raise ConfigError("v_reset must not exceed v_th")

    @property
    def beta(self) -> float:
        return self.dt / self.tau_m


def lif_step(v: float, i_s: float, p: LifParams) -> tuple[float, bool]:
    """One Euler step; returns ``(v_next, fired)`` with hard reset on firing."""
    if not (math.isfinite(v) and math.isfinite(i_s)):
        raise ValueError("lif_step: non-finite input")
    # leak written as a contraction so zero input decays exactly geometrically
    v_next = p.v_rest + (1.0 - p.beta) * (v - p.v_rest) + p.beta * i_s / p.g_l
    if v_next >= p.v_th:
        return p.v_reset, True
    return v_next, False


def lif_run(i_s, p: LifParams, v0: float | None = None):
    """Integrate a current sequence; returns ``(v_trace, spike_steps)``."""
    v = p.v_rest if v0 is None else v0
    vs = np.empty(len(i_s))
    spikes = []
    for k, cur in enumerate(i_s):
        v, fired = lif_step(v, float(cur), p)
        vs[k] = v
        if fired:
            spikes.append(k)
    return vs, spikes


@dataclass(frozen=True)
class RcEquivalence:
    """Leaky capacitor ``C`` with leak resistor ``R`` and injected current.

    Charge form: ``tau_rc dq/dt = -(q - C v_rest) + R C i_inj``; with
    ``i_inj = i_s / (g_l R)`` and ``q = C V`` it is the LIF membrane equation.
    """

    r: float
    c: float
    v_rest: float
    v_th: float
    v_reset: float
    g_l: float

    @property
    def tau_rc(self) -> float:
        return self.r * self.c

    def injected_current(self, i_s):
        return np.asarray(i_s) / (self.g_l * self.r)

    def simulate(self, i_s, dt: float, q0: float | None = None, switched: bool = True):
        """Euler-integrate the charge; returns the charge trace."""
        q = self.c * self.v_rest if q0 is None else q0
        qs = np.empty(len(i_s))
        k_dt = dt / self.tau_rc
        q_th = self.c * self.v_th
        for k, cur in enumerate(self.injected_current(i_s)):
            q = q + k_dt * (-(q - self.c * self.v_rest) + self.r * self.c * cur)
            if switched and q >= q_th:
                q = self.c * self.v_reset
            qs[k] = q
        return qs


def rc_map(p: LifParams, c: float) -> RcEquivalence:
    if not c > 0:
        raise ConfigError("capacitance must be positive")
    return RcEquivalence(r=p.tau_m / c, c=c, v_rest=p.v_rest, v_th=p.v_th,
                         v_reset=p.v_reset, g_l=p.g_l)
