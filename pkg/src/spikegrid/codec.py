"""Rate encoding of analog samples and threshold decoding of membrane traces.

Both directions are the same comparator: a channel spikes at step ``m`` when
its value is strictly above the carrier (threshold) wave at ``t_m``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signals import CarrierSpec, carrier_samples

logger = logging.getLogger(__name__)

INPUT_CHANNELS = ("v_a", "v_b", "v_c", "i_a", "i_b", "i_c")
OUTPUT_CHANNELS = ("pwm_a", "pwm_b", "pwm_c")
RLE_FORMAT = "spikegrid-rle-u32"


@dataclass
class SpikeTrain:
    bits: np.ndarray  # bool, (channels, steps)
    dt: float
    channels: tuple[str, ...] = ()
    t0: float = 0.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("spike bits must be a (channels, steps) matrix")
        if not self.channels:
            self.channels = tuple(f"ch{k}" for k in range(self.bits.shape[0]))
        if len(self.channels) != self.bits.shape[0]:
            raise ValueError("channel names do not match bit matrix")

    @property
    def n_channels(self) -> int:
        return self.bits.shape[0]

    @property
    def n_steps(self) -> int:
        return self.bits.shape[1]

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def count(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    def __eq__(self, other):
        return (isinstance(other, SpikeTrain) and self.dt == other.dt
                and self.channels == other.channels and self.t0 == other.t0
                and np.array_equal(self.bits, other.bits))


@dataclass
class PwmOutput:
    spikes: SpikeTrain
    carrier: CarrierSpec
    saturated_steps: int = 0

    def duties(self) -> np.ndarray:
        return period_duties(self.spikes.bits, self.carrier.steps_per_period(self.spikes.dt))


@dataclass
class EncodeStats:
    clamped: int = 0


def comparator(x: np.ndarray, carrier: np.ndarray) -> np.ndarray:
    return np.asarray(x) > carrier


def rate_encode(x, dt: float, carrier: CarrierSpec, t0: float = 0.0,
                channels: tuple[str, ...] = INPUT_CHANNELS,
                stats: EncodeStats | None = None) -> SpikeTrain:
    """Encode a ``(channels, T)`` per-unit stream into spikes.

    Values outside [-1, 1] are clamped; the number of clamped entries is
    added to ``stats.clamped`` when ``stats`` is given.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValueError("rate_encode: non-finite input")
    n_clamped = int(np.count_nonzero(np.abs(x) > 1.0))
    if n_clamped:
        logger.debug("rate_encode clamped %d entries", n_clamped)
        if stats is not None:
            stats.clamped += n_clamped
        x = np.clip(x, -1.0, 1.0)
    c = carrier_samples(x.shape[1], dt, carrier, t0)
    if len(channels) != x.shape[0]:
        channels = tuple(f"ch{k}" for k in range(x.shape[0]))
    return SpikeTrain(comparator(x, c), dt, tuple(channels), t0)


def decode(u, dt: float, carrier: CarrierSpec, t0: float = 0.0) -> PwmOutput:
    """Compare a 3-channel membrane stream against the threshold wave."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[0] != 3:
        raise ValueError(f"decode expects 3 channels, got {u.shape[0]}")
    sat = int(np.count_nonzero(np.abs(u) > 1.0))
    if sat:
        logger.debug("decode: %d membrane samples outside [-1, 1]", sat)
    c = carrier_samples(u.shape[1], dt, carrier, t0)
    return PwmOutput(SpikeTrain(comparator(u, c), dt, OUTPUT_CHANNELS, t0), carrier, sat)


def period_duties(bits: np.ndarray, steps_per_period: int) -> np.ndarray:
    """Fraction of high steps in each complete carrier period."""
    bits = np.atleast_2d(bits)
    n = bits.shape[1] // steps_per_period
    return bits[:, : n * steps_per_period].reshape(bits.shape[0], n, steps_per_period).mean(axis=2)


# --------------------------------------------------------------------------
# persistence


def _runs(row: np.ndarray) -> np.ndarray:
    """Alternating run lengths starting with a (possibly empty) run of zeros."""
    row = row.astype(np.int8)
    edges = np.flatnonzero(np.diff(row)) + 1
    bounds = np.concatenate([[0], edges, [len(row)]])
    runs = np.diff(bounds)
    if len(row) and row[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype("<u4")


def save_spikes(train: SpikeTrain, path: str | Path) -> tuple[Path, Path]:
    """Write ``path`` (run-length binary) and ``path.json`` (sidecar)."""
    path = Path(path)
    runs = [_runs(r) for r in train.bits]
    with open(path, "wb") as fh:
        for r in runs:
            fh.write(r.tobytes())
    meta = {
        "format": RLE_FORMAT,
        "version": 1,
        "channels": list(train.channels),
        "dt": train.dt,
        "t0": train.t0,
        "n_steps": train.n_steps,
        "horizon": train.horizon,
        "runs_per_channel": [int(len(r)) for r in runs],
    }
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(meta, indent=2))
    return path, side


def load_spikes(path: str | Path) -> SpikeTrain:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if meta.get("format") != RLE_FORMAT:
        raise ValueError(f"{path}: not a {RLE_FORMAT} file")
    raw = np.frombuffer(path.read_bytes(), dtype="<u4")
    bits = np.zeros((len(meta["channels"]), meta["n_steps"]), dtype=bool)
    pos = 0
    for k, n_runs in enumerate(meta["runs_per_channel"]):
        runs = raw[pos: pos + n_runs]
        pos += n_runs
        vals = np.arange(n_runs) % 2 == 1
        row = np.repeat(vals, runs)
        if len(row) != meta["n_steps"]:
            raise ValueError(f"{path}: channel {k} decodes to {len(row)} steps")
        bits[k] = row
    return SpikeTrain(bits, meta["dt"], tuple(meta["channels"]), meta["t0"])


def spikes_to_csv(train: SpikeTrain, path: str | Path) -> None:
    """Tidy event list: one row per spike (t, channel)."""
    ch, idx = np.nonzero(train.bits)
    order = np.lexsort((ch, idx))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "channel"])
        for k in order:
            wr.writerow([f"{train.t0 + idx[k] * train.dt:.8f}", train.channels[ch[k]]])
