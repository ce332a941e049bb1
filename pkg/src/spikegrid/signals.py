"""Reference frames, carrier waveforms and moving-window statistics.

Park convention used throughout the package: amplitude-invariant, with the
q axis 90 degrees ahead of the d axis, i.e.

    x_a(t) = x_d cos(theta) - x_q sin(theta)

so that the complex space vector ``x_d + j x_q`` rotated by ``exp(j theta)``
gives phase a on its real part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

TWO_PI_3 = 2.0 * math.pi / 3.0


class SignalError(ValueError):
    """Raised on non-finite or otherwise invalid signal input."""


class AbcFrame(NamedTuple):
    a: float
    b: float
    c: float
    t: float = 0.0


class DqSample(NamedTuple):
    """One synchronous measurement frame in per-unit."""

    v_d: float
    v_q: float
    i_d: float
    i_q: float
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.v_d, self.v_q, self.i_d, self.i_q])


@dataclass(frozen=True)
class PerUnitBases:
    """Peak-value bases; with these, P = v_d i_d + v_q i_q in pu."""

    v_base: float = 1.0
    s_base: float = 1.0
    f_base: float = 50.0

    @property
    def i_base(self) -> float:
        return 2.0 * self.s_base / (3.0 * self.v_base)

    @property
    def z_base(self) -> float:
        return self.v_base / self.i_base

    @property
    def omega_base(self) -> float:
        return 2.0 * math.pi * self.f_base

    @classmethod
    def from_rms_line_to_neutral(cls, v_rms: float, s_base: float, f_base: float = 50.0):
        return cls(v_base=v_rms * math.sqrt(2.0), s_base=s_base, f_base=f_base)


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise SignalError(f"non-finite input value: {v!r}")


def abc_to_dq0(a, b, c, theta):
    """Amplitude-invariant Park transform, returns (d, q, zero).

    Works elementwise on scalars or numpy arrays.
    """
    if np.ndim(a) == 0 and np.ndim(theta) == 0:
        _check_finite(float(a), float(b), float(c), float(theta))
    elif not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))
              and np.all(np.isfinite(c)) and np.all(np.isfinite(theta))):
        raise SignalError("non-finite values in abc input")
    ca, cb, cc = np.cos(theta), np.cos(theta - TWO_PI_3), np.cos(theta + TWO_PI_3)
    sa, sb, sc = np.sin(theta), np.sin(theta - TWO_PI_3), np.sin(theta + TWO_PI_3)
    d = (2.0 / 3.0) * (a * ca + b * cb + c * cc)
    q = -(2.0 / 3.0) * (a * sa + b * sb + c * sc)
    z = (a + b + c) / 3.0
    return d, q, z


def abc_to_dq(frame: AbcFrame, theta: float) -> tuple[float, float]:
    d, q, _ = abc_to_dq0(frame.a, frame.b, frame.c, theta)
    return float(d), float(q)


def dq0_to_abc(d, q, z, theta):
    a = d * np.cos(theta) - q * np.sin(theta) + z
    b = d * np.cos(theta - TWO_PI_3) - q * np.sin(theta - TWO_PI_3) + z
    c = d * np.cos(theta + TWO_PI_3) - q * np.sin(theta + TWO_PI_3) + z
    return a, b, c


def dq_to_abc(d: float, q: float, theta: float, t: float = 0.0) -> AbcFrame:
    _check_finite(d, q, theta)
    a, b, c = dq0_to_abc(d, q, 0.0, theta)
    return AbcFrame(float(a), float(b), float(c), t)


def phasor_to_abc(x: complex | np.ndarray, theta) -> np.ndarray:
    """Phase quantities of the space vector ``x`` at frame angle ``theta``.

    Returns an array shaped ``(3,) + broadcast shape``.
    """
    x = np.asarray(x)
    return np.stack([
        np.real(x * np.exp(1j * theta)),
        np.real(x * np.exp(1j * (theta - TWO_PI_3))),
        np.real(x * np.exp(1j * (theta + TWO_PI_3))),
    ])


def abc_to_phasor(abc, theta):
    d, q, _ = abc_to_dq0(abc[0], abc[1], abc[2], theta)
    return d + 1j * q


# --------------------------------------------------------------------------
# carrier / threshold waveforms


@dataclass(frozen=True)
class CarrierSpec:
    period: float
    shape: str = "sawtooth"

    def __post_init__(self):
        if not (self.period > 0 and math.isfinite(self.period)):
            raise SignalError(f"carrier period must be positive, got {self.period}")
        if self.shape not in ("sawtooth", "triangular"):
            raise SignalError(f"unknown carrier shape {self.shape!r}")

    def steps_per_period(self, dt: float) -> int:
        n = self.period / dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise SignalError(f"carrier period {self.period} is not a multiple of dt {dt}")
        return int(round(n))


def threshold_wave(t, spec: CarrierSpec):
    """Carrier value in [-1, 1) at time ``t``.

    Rising sawtooth: on ``[(N-1) Ts, N Ts)`` the value is
    ``(2/Ts) * (t - (2N-1)/2 * Ts)``. The triangular shape rises over the first
    half period and falls over the second.
    """
    t = np.asarray(t, dtype=float)
    ts = spec.period
    k = np.floor(t / ts)
    frac = t / ts - k
    # floor() can land one period low when t is an exact multiple
    frac = np.where(frac >= 1.0, frac - 1.0, frac)
    frac = np.where(frac < 0.0, 0.0, frac)
    if spec.shape == "sawtooth":
        out = 2.0 * frac - 1.0
    else:
        out = np.where(frac < 0.5, 4.0 * frac - 1.0, 3.0 - 4.0 * frac)
    return out if out.ndim else float(out)


def carrier_samples(n_steps: int, dt: float, spec: CarrierSpec, t0: float = 0.0) -> np.ndarray:
    """Carrier on the simulation grid, computed from the integer step index.

    Using the index avoids the float drift of ``t0 + k*dt`` at period edges.
    """
    n = spec.steps_per_period(dt)
    k0 = int(round(t0 / dt))
    idx = (np.arange(n_steps) + k0) % n
    frac = idx / n
    if spec.shape == "sawtooth":
        return 2.0 * frac - 1.0
    return np.where(frac < 0.5, 4.0 * frac - 1.0, 3.0 - 4.0 * frac)


# --------------------------------------------------------------------------
# moving window


@dataclass
class MovingWindow:
    """Fixed-capacity sliding window with running mean and biased variance.

    Eviction updates use a Welford-style replacement step; the exact statistics
    are recomputed from the buffer every ``capacity`` pushes to bound drift.
    """

    capacity: int
    buffer: np.ndarray = field(init=False, repr=False)
    count: int = field(init=False, default=0)
    mean: float = field(init=False, default=0.0)
    _m2: float = field(init=False, default=0.0, repr=False)
    _head: int = field(init=False, default=0, repr=False)
    _since_exact: int = field(init=False, default=0, repr=False)

    def __post_init__(self):
        if self.capacity < 2:
            raise SignalError("moving window needs capacity >= 2")
        self.buffer = np.zeros(self.capacity)

    def push(self, x: float) -> "MovingWindow":
        x = float(x)
        if not math.isfinite(x):
            raise SignalError(f"non-finite sample {x!r}")
        n = self.capacity
        if self.count < n:
            self.buffer[self.count] = x
            self.count += 1
            delta = x - self.mean
            self.mean += delta / self.count
            self._m2 += delta * (x - self.mean)
        else:
            old = self.buffer[self._head]
            self.buffer[self._head] = x
            self._head = (self._head + 1) % n
            new_mean = self.mean + (x - old) / n
            self._m2 += (x - old) * (x - new_mean + old - self.mean)
            self.mean = new_mean
        self._since_exact += 1
        if self._since_exact >= n:
            self.recompute()
        return self

    def extend(self, xs) -> "MovingWindow":
        xs = np.asarray(xs, dtype=float).ravel()
        if not np.all(np.isfinite(xs)):
            raise SignalError("non-finite sample in block")
        n = self.capacity
        if self.count < n or len(xs) < 2:
            for x in xs:
                self.push(x)
            return self
        # full window: write the block into the ring and recompute exactly
        tail = xs[-n:]
        idx = (self._head + len(xs) - len(tail) + np.arange(len(tail))) % n
        self.buffer[idx] = tail
        self._head = (self._head + len(xs)) % n
        self.recompute()
        return self

    def recompute(self) -> None:
        data = self.values()
        self.mean = float(data.mean()) if len(data) else 0.0
        self._m2 = float(((data - self.mean) ** 2).sum()) if len(data) else 0.0
        self._since_exact = 0

    def values(self) -> np.ndarray:
        """Buffer contents, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.concatenate([self.buffer[self._head:], self.buffer[: self._head]])

    @property
    def variance(self) -> float:
        """Biased variance over min(count, capacity) samples."""
        if self.count == 0:
            return 0.0
        return max(self._m2, 0.0) / self.count

    @property
    def full(self) -> bool:
        return self.count >= self.capacity


def window_push(w: MovingWindow, x: float) -> MovingWindow:
    return w.push(x)


def sliding_variance(x: np.ndarray, n_w: int) -> np.ndarray:
    """Biased variance of ``x[m-n_w:m]`` for every m (NaN where m < n_w).

    Entry ``m`` describes the window that ends just before sample ``m``.
    """
    x = np.asarray(x, dtype=float)
    out = np.full(len(x) + 1, np.nan)
    if len(x) < n_w:
        return out
    # shift by the series mean to limit cancellation in the sum of squares
    xs = x - x.mean()
    c1 = np.concatenate([[0.0], np.cumsum(xs)])
    c2 = np.concatenate([[0.0], np.cumsum(xs * xs)])
    s1 = c1[n_w:] - c1[:-n_w]
    s2 = c2[n_w:] - c2[:-n_w]
    var = s2 / n_w - (s1 / n_w) ** 2
    out[n_w:] = np.maximum(var, 0.0)
    return out
