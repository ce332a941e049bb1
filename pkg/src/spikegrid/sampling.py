"""Variance-triggered event detection and the SNN activation state machine.

Each of the four dq channels keeps a moving window of its last ``N_w``
samples. A channel event fires when the biased window variance exceeds the
channel's threshold; the combined event is the OR of the four. The decision
for sample ``m`` is taken on the window that ends at ``m - 1``; if it holds,
sample ``m`` is forwarded to the network and then pushed into the window.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .signals import DqSample, MovingWindow, sliding_variance

logger = logging.getLogger(__name__)

CHANNELS = ("v_d", "v_q", "i_d", "i_q")


class Status(str, Enum):
    IDLE = "idle"
    ACTIVE = "active"


@dataclass(frozen=True)
class EventThresholds:
    sigma_v: float = 0.15
    sigma_i: float = 0.05

    def __post_init__(self):
        if not (self.sigma_v > 0 and self.sigma_i > 0):
            raise ValueError("variance thresholds must be positive")

    def per_channel(self) -> tuple[float, float, float, float]:
        return (self.sigma_v, self.sigma_v, self.sigma_i, self.sigma_i)


@dataclass
class EventRecord:
    t_start: float
    t_end: float | None
    trigger_mask: int
    n_forwarded: int
    m_start: int
    m_end: int | None = None


@dataclass
class EventState:
    status: Status = Status.IDLE
    flags: tuple[bool, bool, bool, bool] = (False, False, False, False)
    t_start: float | None = None
    t_end: float | None = None

    @property
    def omega(self) -> bool:
        return any(self.flags)


def channel_event(w: MovingWindow, sigma_th: float) -> bool:
    """True iff the window's biased variance exceeds ``sigma_th``."""
    if w.count < 2:
        logger.debug("channel_event on a window with %d samples; reporting idle", w.count)
        return False
    return w.variance > sigma_th


def trigger_mask(flags) -> int:
    return sum(1 << k for k, f in enumerate(flags) if f)


class SemanticSampler:
    """Streaming activation gate for one inverter.

    ``holdoff`` is the number of consecutive quiet checks required before the
    event is closed (0 closes on the first quiet check). Until all windows
    hold ``n_w`` samples the gate stays idle.
    """

    def __init__(self, n_w: int = 4000, thresholds: EventThresholds | None = None,
                 holdoff: int = 0, dt: float = 1e-5):
        self.n_w = int(n_w)
        self.thresholds = thresholds or EventThresholds()
        self.holdoff = int(holdoff)
        self.dt = dt
        self.windows = [MovingWindow(self.n_w) for _ in CHANNELS]
        self.state = EventState()
        self.events: list[EventRecord] = []
        self.m = 0
        self._quiet = 0
        self._current: EventRecord | None = None

    def _verify(self) -> tuple[bool, ...]:
        if not self.windows[0].full:
            return (False, False, False, False)
        return tuple(channel_event(w, th) for w, th in
                     zip(self.windows, self.thresholds.per_channel()))

    def step(self, sample: DqSample) -> tuple[EventState, DqSample | None]:
        flags = self._verify()
        omega = any(flags)
        st = self.state
        forwarded = None
        if st.status is Status.IDLE:
            if omega:
                st.status = Status.ACTIVE
                st.t_start = sample.t
                st.t_end = None
                self._quiet = 0
                self._current = EventRecord(sample.t, None, trigger_mask(flags), 0, self.m)
                self.events.append(self._current)
        else:
            if omega:
                self._quiet = 0
                self._current.trigger_mask |= trigger_mask(flags)
            else:
                self._quiet += 1
                if self._quiet > self.holdoff:
                    st.status = Status.IDLE
                    st.t_end = sample.t
                    self._current.t_end = sample.t
                    self._current.m_end = self.m
                    self._current = None
        st.flags = flags
        if st.status is Status.ACTIVE:
            forwarded = sample
            self._current.n_forwarded += 1
        for w, x in zip(self.windows, sample[:4]):
            w.push(x)
        self.m += 1
        return st, forwarded

    def scan_idle(self, xs: np.ndarray) -> int:
        """Number of leading rows of ``xs`` (L, 4) that pass while idle.

        Equivalent to calling :meth:`step` row by row and stopping at the
        first row that would open an event. Requires an idle gate with full
        windows.
        """
        if self.active or not self.windows[0].full:
            raise RuntimeError("scan_idle needs an idle gate with full windows")
        xs = np.asarray(xs, dtype=float)
        n = len(xs)
        if n == 0:
            return 0
        first = n
        for ch, (w, th) in enumerate(zip(self.windows, self.thresholds.per_channel())):
            series = np.concatenate([w.values(), xs[:, ch]])
            var = sliding_variance(series[:-1], self.n_w)[self.n_w:]
            hits = np.flatnonzero(var > th)
            if len(hits):
                first = min(first, int(hits[0]))
        return first

    def advance_idle(self, xs: np.ndarray) -> None:
        """Consume rows known (via :meth:`scan_idle`) not to open an event."""
        xs = np.asarray(xs, dtype=float)
        if len(xs) == 0:
            return
        for ch, w in enumerate(self.windows):
            w.extend(xs[:, ch])
        self.state.flags = (False, False, False, False)
        self.m += len(xs)

    def close(self, t: float) -> None:
        """Terminate an event still open at the end of a run."""
        if self._current is not None:
            self._current.t_end = t
            self._current.m_end = self.m
            self._current = None

    @property
    def active(self) -> bool:
        return self.state.status is Status.ACTIVE


def step(state_machine: SemanticSampler, sample: DqSample):
    return state_machine.step(sample)


def gate_trace(x: np.ndarray, dt: float, n_w: int = 4000,
               thresholds: EventThresholds | None = None, holdoff: int = 0):
    """Run the sampler over an ``(T, 4)`` dq trace.

    Returns ``(active_mask, events)``.
    """
    x = np.asarray(x, dtype=float)
    sm = SemanticSampler(n_w, thresholds, holdoff, dt)
    active = np.zeros(len(x), dtype=bool)
    for m, row in enumerate(x):
        _, fwd = sm.step(DqSample(row[0], row[1], row[2], row[3], m * dt))
        active[m] = fwd is not None
    sm.close(len(x) * dt)
    return active, sm.events


def write_event_log(events, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t_start", "t_end", "trigger_channel_mask", "n_samples_forwarded"])
        for ev in events:
            wr.writerow([f"{ev.t_start:.6f}", "" if ev.t_end is None else f"{ev.t_end:.6f}",
                         ev.trigger_mask, ev.n_forwarded])


def read_event_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {
                "t_start": float(r["t_start"]),
                "t_end": float(r["t_end"]) if r["t_end"] else None,
                "trigger_channel_mask": int(r["trigger_channel_mask"]),
                "n_samples_forwarded": int(r["n_samples_forwarded"]),
            }
            for r in csv.DictReader(fh)
        ]
