"""Neuron-activity counting and the linear power model.

Power is ``N * E_data * f_op``: the mean number of active neurons per update,
the energy of one active-neuron update and the update rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARCHITECTURES = ("snn", "binary_rnn", "ann")
F_OP_DEFAULT = 1e6  # Hz

# reference comparison: (architecture, N_on, N_off, E_data pJ, P_on mW, P_off mW)
TABLE1 = (
    ("snn", 342.4, 0.0, 23.6, 8.08, 0.0),
    ("binary_rnn", 360.0, 256.6, 23.6, 8.50, 6.06),
    ("ann", 521.0, 521.0, 116.7, 60.80, 60.80),
)


@dataclass
class ActivityReport:
    """Mean active neurons per update while Active (``n_on``) and Idle (``n_off``)."""

    architecture: str
    n_on: float | None
    n_off: float
    events: int
    horizon: float
    per_event: list[float] = field(default_factory=list)
    steps_on: int = 0
    steps_off: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if (self.n_on is not None and self.n_on < 0) or self.n_off < 0:
            raise ValueError("activity counts must be non-negative")


@dataclass
class EnergyModel:
    e_data_pj: float
    f_op: float = F_OP_DEFAULT
    architecture: str = "snn"

    def __post_init__(self):
        if not (self.e_data_pj > 0 and self.f_op > 0):
            raise ValueError("E_data and f_op must be positive")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")


def neuron_power_mw(n: float, e_data_pj: float, f_op: float = F_OP_DEFAULT) -> float:
    return n * e_data_pj * 1e-12 * f_op * 1e3


def power(report: ActivityReport, model: EnergyModel) -> tuple[float, float]:
    """``(P_on, P_off)`` in mW. An empty on-state gives ``P_on = nan``."""
    p_on = float("nan") if report.n_on is None else neuron_power_mw(report.n_on, model.e_data_pj, model.f_op)
    return p_on, neuron_power_mw(report.n_off, model.e_data_pj, model.f_op)


def count_activity(bundles, architecture: str = "snn") -> ActivityReport:
    """Aggregate neuron activity over one or more trace bundles.

    ``snn``: a neuron is active at a step if it emitted a spike or received
    one through a nonzero weight (inputs count when spiking), from the
    counters recorded during the run. ``N_on`` is the mean over events of the
    per-event mean. ``ann``: every neuron updates at every step, Active or
    not. ``binary_rnn`` needs recorded binary-state counters.
    """
    if not isinstance(bundles, (list, tuple)):
        bundles = [bundles]
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    per_event, events = [], 0
    steps_on = steps_off = 0
    off_sum = 0.0
    horizon = 0.0
    sizes = None
    for b in bundles:
        horizon += float(b.metrics.get("horizon", 0.0))
        for act in b.activity:
            if "per_event" not in act or "steps_off" not in act:
                raise ValueError("trace has no activity counters")
            sizes = act.get("layer_sizes") or sizes
            events += act["events"]
            steps_on += act["steps_on"]
            steps_off += act["steps_off"]
            off_sum += float(np.sum(act["active_sum_off"]))
            if architecture == "binary_rnn":
                if "binary_state_on" not in act:
                    raise ValueError("trace has no binary-state counters")
                per_event.extend(act["binary_state_on"])
            else:
                per_event.extend(float(np.sum(e["active_sum"])) / e["steps"]
                                 for e in act["per_event"] if e["steps"])
    if architecture == "ann":
        if sizes is None:
            raise ValueError("trace does not record the network size")
        n = float(sum(sizes))
        return ActivityReport("ann", n, n, events, horizon,
                              [n] * len(per_event), steps_on, steps_off)
    if architecture == "binary_rnn":
        n_off = 0.0
        for b in bundles:
            for act in b.activity:
                n_off += float(np.sum(act.get("binary_state_off", 0.0)))
        n_off = n_off / steps_off if steps_off else 0.0
    else:
        n_off = off_sum / steps_off if steps_off else 0.0
    n_on = float(np.mean(per_event)) if per_event else None
    return ActivityReport(architecture, n_on, n_off, events, horizon, per_event, steps_on, steps_off)


def count_raster(raster, n_out: int = 3) -> np.ndarray:
    """Brute-force per-step active count from a recorded raster.

    ``raster`` entries are ``(m, input_bits, [hidden spikes...])`` with dense
    layers, so a neuron of layer ``l`` is active when it spikes or any neuron
    of layer ``l-1`` spiked; the ``n_out`` output neurons are active when the
    last hidden layer spiked.
    """
    out = []
    for _, bits, hidden in raster:
        layers = [np.asarray(bits, dtype=bool)] + [np.asarray(h, dtype=bool) for h in hidden]
        total = int(layers[0].sum())
        for pre, post in zip(layers[:-1], layers[1:]):
            total += int(np.count_nonzero(post | pre.any()))
        if layers[-1].any():
            total += n_out
        out.append(total)
    return np.array(out, dtype=float)


def table1_rows(f_op: float = F_OP_DEFAULT) -> list[dict]:
    """Powers recomputed from the reference (N, E_data) columns."""
    rows = []
    for arch, n_on, n_off, e, p_on, p_off in TABLE1:
        rows.append({
            "architecture": arch,
            "P_off": neuron_power_mw(n_off, e, f_op),
            "P_on": neuron_power_mw(n_on, e, f_op),
            "N_on": n_on, "N_off": n_off, "E_data": e,
            "P_on_published": p_on, "P_off_published": p_off,
        })
    return rows


def energy_rows(bundles, e_data: dict[str, float] | None = None,
                f_op: float = F_OP_DEFAULT) -> list[dict]:
    """Reference-table rows measured on simulated traces (snn and ann)."""
    e_data = e_data or {a: e for a, _, _, e, _, _ in TABLE1}
    rows = []
    for arch in ("snn", "ann"):
        rep = count_activity(bundles, arch)
        p_on, p_off = power(rep, EnergyModel(e_data[arch], f_op, arch))
        rows.append({"architecture": arch, "P_off": p_off, "P_on": p_on,
                     "N_on": rep.n_on, "N_off": rep.n_off, "E_data": e_data[arch],
                     "events": rep.events})
    return rows


def write_report(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys())
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
