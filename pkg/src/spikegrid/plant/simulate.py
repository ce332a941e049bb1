"""Closed-loop scenario runner.

Per sample ``m`` (period ``dt``): disturbances scheduled for ``m`` are applied,
each converter's local dq sample goes through its activation gate, the
controller emits a modulation sample, and the plant advances one step with
the terminal voltages of the duty cycles decoded from the *previous* carrier
period (average-value model, one carrier period of actuation delay).

Controllers:

``vsg_direct``
    VSG reference control (with the secondary layer) drives the converters.
    The gated, encoded inputs and VSG modulation targets of every event are
    collected as training segments.

``snn``
    While a converter's gate is active its network consumes the encoded
    sample and, after a short warm-up, its output membrane is added to the
    phasor held at event onset (``snn.residual``; otherwise it is the whole
    modulation). While idle the converter holds the fundamental phasor of
    the last applied modulation, rotating at nominal frequency.
"""

from __future__ import annotations

import cmath
import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ..codec import period_duties
from ..signals import CarrierSpec, DqSample, carrier_samples
from ..sampling import EventThresholds, SemanticSampler
from ..snn.network import OnlineSnn, SnnModel
from ..snn.train import TrainingBatch
from .control import VsgState, frt_limit, secondary_update, vsg_reference
from .network import NetworkModel
from .scenario import Scenario

logger = logging.getLogger(__name__)

A120 = cmath.exp(2j * math.pi / 3)
# space vector of (a, b, c): (2/3)(a + b*A120 + c*A120^2)
SV = np.array([1.0, A120, A120 ** 2]) * (2.0 / 3.0)
PHASE_SHIFT = np.array([1.0, A120.conjugate(), A120])  # e^{-j 2pi k/3}

TRACE_COLUMNS = ("v_d", "v_q", "i_d", "i_q", "v_mag", "i_mag", "p", "q",
                 "m_a", "active")


class SimulationAborted(RuntimeError):
    pass


@dataclass
class TraceBundle:
    scenario: str
    controller: str
    config: dict
    dt: float
    t: np.ndarray  # decimated time axis
    conv_names: list[str]
    traces: dict  # column -> (n_log, n_conv) array
    grid: dict  # extra network-wide series
    events: list[list]  # per converter EventRecord lists
    activity: list[dict]  # per converter neuron-activity accumulators
    flags: dict
    metrics: dict
    datasets: list[list[TrainingBatch]] = field(default_factory=list)
    rasters: list[list] = field(default_factory=list)
    pwm: list = field(default_factory=list)

    @property
    def unstable(self) -> bool:
        return bool(self.flags.get("unstable"))


@dataclass
class _ConvRuntime:
    name: str
    sampler: SemanticSampler
    vsg: VsgState | None = None
    snn: OnlineSnn | None = None
    model: SnnModel | None = None
    phi: float = 0.0  # local frame offset (snn mode)
    hold: complex = 0j  # held modulation phasor, nominal frame
    m_buf: np.ndarray | None = None
    e_sv: complex = 0j  # terminal space vector of current period
    warm: int = 0
    u_hist: list = field(default_factory=list)
    seg_x: list = field(default_factory=list)
    seg_y: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    act_on_steps: int = 0
    act_off_steps: int = 0
    act_on_sum: np.ndarray | None = None
    act_off_sum: np.ndarray | None = None
    spikes_on: np.ndarray | None = None
    raster: list = field(default_factory=list)
    ev_steps: int = 0
    ev_sum: np.ndarray | None = None
    ev_log: list = field(default_factory=list)  # (steps, per-layer active sums) per event
    pwm_bits: list = field(default_factory=list)
    clamped: int = 0


class Simulation:
    def __init__(self, scenario: Scenario, controller: str = "vsg_direct",
                 models: list[SnnModel] | SnnModel | None = None,
                 adapted: list[SnnModel] | SnnModel | None = None,
                 record_dataset: bool = False, record_rasters: bool = False,
                 log_every: int = 10, preroll_cache: dict | None = None):
        if controller not in ("vsg_direct", "snn"):
            raise ValueError(f"unknown controller {controller!r}")
        self.scn = scenario
        self.controller = controller
        self.dt = scenario.dt
        cfg = scenario.config
        self.wb = 2 * math.pi * cfg["bases"]["f_base"]
        self.topo = _copy_topology(scenario.topology)
        self.net = NetworkModel(self.topo, self.dt, self.wb)
        self.nc = self.net.nc
        codec = cfg["codec"]
        self.pwm = CarrierSpec(float(codec["pwm_period"]))
        self.enc = CarrierSpec(float(codec["enc_period"] or codec["pwm_period"]))
        self.n_pp = self.pwm.steps_per_period(self.dt)
        self.n_enc = self.enc.steps_per_period(self.dt)
        self.oversample = int(codec["gate_oversample"])
        self.gate_carrier = carrier_samples(self.n_pp * self.oversample,
                                            self.dt / self.oversample, self.pwm)
        self.enc_carrier = carrier_samples(self.n_enc, self.dt, self.enc)
        self.v_norm = float(codec["v_norm"])
        self.i_norm = float(codec["i_norm"])
        smp = cfg["sampling"]
        self.thresholds = EventThresholds(float(smp["sigma_v"]), float(smp["sigma_i"]))
        self.n_w = int(smp["n_w"])
        self.holdoff = int(smp["holdoff"])
        self.warmup = int(round(float(cfg["snn"]["warmup"]) / self.dt))
        self.residual = bool(cfg["snn"]["residual"])
        self.hold_len = int(round(cfg["snn"]["hold_cycles"] / cfg["bases"]["f_base"] / self.dt))
        self.frt = cfg["frt"]
        self.stab = cfg["stability"]
        self.record_dataset = record_dataset
        self.record_rasters = record_rasters
        self.log_every = int(log_every)
        self.models = _per_conv(models, self.nc)
        self.adapted = _per_conv(adapted, self.nc) if adapted is not None else None
        if controller == "snn" and self.models is None:
            raise ValueError("snn controller needs a model")
        if self.models is not None:
            for mdl in self.models:
                if mdl.sizes[0] != 6 or mdl.sizes[-1] != 3:
                    raise ValueError(f"model layer sizes {mdl.sizes} do not fit 6 inputs / 3 outputs")
                if abs(mdl.dt - self.dt) > 1e-15:
                    raise ValueError("model dt differs from the scenario sampling period")
        self.preroll_cache = preroll_cache
        self.vsg = copy.deepcopy(scenario.vsg)
        self._half = cmath.exp(0.5j * self.wb * self.dt)

    # ------------------------------------------------------------------
    def _measure(self, z):
        net = self.net
        v = z[..., net.nc + net.ng + net.nl + net.conv_bus]
        i = z[..., :net.nc]
        return v, i

    def _rot(self, m):
        return cmath.exp(1j * self.wb * self.dt * m)

    def _preroll(self):
        """Settle the network under VSG control from a flat start, through the PWM path."""
        key = self.scn.hash()
        if self.preroll_cache is not None and key in self.preroll_cache:
            return self.preroll_cache[key]
        net, dt = self.net, self.dt
        z = np.zeros(net.n, dtype=complex)
        z[net.nc + net.ng + net.nl:] = 1.0
        states = [VsgState() for _ in range(self.nc)]
        ratings = [1.0] * self.nc
        n_steps = int(round(float(self.scn.config["preroll"]) / dt))
        n_steps -= n_steps % self.n_pp
        hist = np.zeros((self.n_w, self.nc, 4))
        m_ph = np.zeros(self.nc, dtype=complex)
        conv = self.topo.converters
        e_sv = np.array([c.e_max for c in conv], dtype=complex)
        m_buf = np.zeros((self.nc, self.n_pp, 3))
        u = np.zeros(net.n_in, dtype=complex)
        u[self.nc:] = [g.v for g in self.topo.grids]
        ad, bd = net.discrete()
        for step in range(n_steps):
            v, i = self._measure(z)
            rot = self._rot(step)
            for k, c in enumerate(conv):
                m_ph[k] = vsg_reference(states[k], v[k], i[k], self.vsg[k], dt, self.wb,
                                        c.r_f, c.x_f, c.e_max,
                                        c.i_max if self.frt["target_limit"] else None)
                m_buf[k, step % self.n_pp] = (m_ph[k] * rot * PHASE_SHIFT).real
            secondary_update(states, list(np.abs(v)), [st.q_f for st in states],
                             ratings, self.scn.secondary, dt)
            u[: self.nc] = e_sv * (rot * self._half).conjugate()
            z = ad @ z + bd @ u
            if step % self.n_pp == self.n_pp - 1:
                for k, c in enumerate(conv):
                    e_sv[k] = c.e_max * complex(SV @ (2.0 * self._duties(m_buf[k]) - 1.0))
            row = step - (n_steps - self.n_w)
            if row >= 0:
                for k in range(self.nc):
                    r = cmath.exp(-1j * states[k].delta)
                    vl, il = v[k] * r, i[k] * r
                    hist[row, k] = (vl.real, vl.imag, il.real, il.imag)
        out = (z, states, hist, m_ph.copy(), e_sv.copy())
        if self.preroll_cache is not None:
            self.preroll_cache[key] = out
        return out

    def _duties(self, m_abc):
        """Per-phase duty of one carrier period of modulation samples (n_pp, 3)."""
        mod = np.repeat(m_abc, self.oversample, axis=0)
        return (mod > self.gate_carrier[:, None]).mean(axis=0)

    # ------------------------------------------------------------------
    def _setup(self):
        net, dt, nc = self.net, self.dt, self.nc
        z, states0, hist, m0, e0 = self._preroll()
        self.z = z.copy()
        conv = self.topo.converters
        self.runs = []
        for k, c in enumerate(conv):
            smp = SemanticSampler(self.n_w, self.thresholds, self.holdoff, dt)
            rt = _ConvRuntime(c.name, smp)
            st = copy.deepcopy(states0[k])
            if self.controller == "vsg_direct":
                rt.vsg = st
            else:
                rt.model = self.models[k]
                rt.snn = OnlineSnn(rt.model)
                rt.phi = st.delta
            rt.hold = m0[k]
            # the windows start full of settled samples
            for ch in range(4):
                smp.windows[ch].extend(hist[:, k, ch])
            rt.m_buf = np.zeros((self.n_pp, 3))
            rt.e_sv = e0[k]
            n_layers = len(self.models[k].sizes) if self.models is not None else 4
            rt.act_on_sum = np.zeros(n_layers)
            rt.act_off_sum = np.zeros(n_layers)
            rt.spikes_on = np.zeros(max(n_layers - 2, 0), dtype=np.int64)
            self.runs.append(rt)
        self.n_steps = int(round(self.scn.duration / dt))
        n_log = self.n_steps // self.log_every + 1
        self.traces = {c: np.full((n_log, nc), np.nan) for c in TRACE_COLUMNS}
        self.grid = {k: np.full(n_log, np.nan) for k in ("balance_residual", "v_avg", "q_spread", "load")}
        self.t_log = np.full(n_log, np.nan)
        self.schedule = {}
        for d in self.scn.schedule:
            self.schedule.setdefault(int(round(d.t / dt)), []).append(d)
        self.grid_u = np.array([g.v for g in self.topo.grids], dtype=complex)
        self.flags = {"unstable": False, "overcurrent": False, "aborted": False,
                      "modulation_saturated": 0, "max_current": 0.0,
                      "max_balance_residual": 0.0, "t_unstable": None}
        self.reconfigured = False
        self.over_count = 0
        self.sustain = max(1, int(round(float(self.stab["sustain"]) / dt)))
        self.v_max = float(self.stab["v_max"])
        self.i_trip = self.stab.get("i_trip")
        self.i_max = np.array([c.i_max for c in conv])
        self.switched_at = set()
        self._refresh_matrices()
        self.frames = np.array([rt.phi for rt in self.runs])

    def _refresh_matrices(self):
        self.ad, self.bd = self.net.discrete()
        self.wgt_e, self.r_loss, self.src_idx = _energy_vectors(self.net)
        self.g_bus = np.array([b.g_load for b in self.topo.buses])

    def run(self) -> TraceBundle:
        self._setup()
        m = 0
        self.last_step = self.n_steps
        while m <= self.n_steps:
            if self._fast_ok(m):
                nxt = self._idle_chunk(m)
                if nxt > m:
                    m = nxt
                    if self._stop:
                        break
                    continue
            self._step(m)
            m += 1
            if self._stop:
                break
        return self._finish()

    _stop = False

    def _halt(self, m, reason):
        self.flags["unstable"] = True
        if self.flags["t_unstable"] is None:
            self.flags["t_unstable"] = m * self.dt
        self.last_step = m
        self._stop = True
        logger.info("run stopped at t=%.4f: %s", m * self.dt, reason)

    def _apply_schedule(self, m):
        for d in self.schedule[m]:
            self._apply(d, self.grid_u, self.runs)
            if d.kind == "line_outage":
                self.reconfigured = True
        self.z = self.net.apply_switching(self.z)
        self._refresh_matrices()
        self.switched_at.add(m)

    def _step(self, m):
        dt, nc, conv = self.dt, self.nc, self.topo.converters
        if m in self.schedule:
            self._apply_schedule(m)
        z = self.z
        v, i = self._measure(z)
        t = m * dt
        rot = self._rot(m)
        for k, rt in enumerate(self.runs):
            frame = rt.vsg.delta if rt.vsg is not None else rt.phi
            r = cmath.exp(-1j * frame)
            vl, il = v[k] * r, i[k] * r
            _, fwd = rt.sampler.step(DqSample(vl.real, vl.imag, il.real, il.imag, t))
            active = fwd is not None
            if rt.vsg is not None:
                mph = vsg_reference(rt.vsg, v[k], i[k], self.vsg[k], dt, self.wb,
                                    conv[k].r_f, conv[k].x_f, conv[k].e_max,
                                    conv[k].i_max if self.frt["target_limit"] else None)
                m_abc = (mph * rot * PHASE_SHIFT).real
                if self.record_dataset:
                    self._record(rt, active, v[k], i[k], rot, m_abc, m, mph)
            else:
                m_abc = self._snn_sample(rt, k, active, v[k], i[k], rot, m)
            rt.m_buf[m % self.n_pp] = m_abc
        if self.runs[0].vsg is not None:
            secondary_update([r.vsg for r in self.runs], list(np.abs(v)),
                             [r.vsg.q_f for r in self.runs], [1.0] * nc, self.scn.secondary, dt)
        u = np.empty(self.net.n_in, dtype=complex)
        rot_mid = (rot * self._half).conjugate()
        for k, rt in enumerate(self.runs):
            u[k] = rt.e_sv * rot_mid
        u[nc:] = self.grid_u
        if self.frt["runtime_limit"]:
            self._runtime_limit(z, u)
        z_next = self.ad @ z + self.bd @ u
        if m % self.n_pp == self.n_pp - 1:
            for k, rt in enumerate(self.runs):
                rt.e_sv = self._period_sv(rt, conv[k].e_max)
        if not np.all(np.isfinite(z_next)):
            self.flags["aborted"] = True
            self._halt(m, "non-finite plant state")
            return
        self._check(m, v[None], i[None])
        if m % self.log_every == 0:
            self._log(np.array([m]), v[None], i[None], u[None], z[None], z_next[None])
        self.z = z_next

    def _check(self, m0, v, i):
        """Current and voltage supervision over consecutive steps starting at ``m0``."""
        i_mag = np.abs(i)
        self.flags["max_current"] = max(self.flags["max_current"], float(i_mag.max()))
        if np.any(i_mag > self.i_max * 1.02):
            self.flags["overcurrent"] = True
        if self.i_trip is not None:
            hit = np.flatnonzero((i_mag > self.i_trip).any(axis=1))
            if len(hit):
                self._halt(m0 + int(hit[0]), "current trip")
                return
        high = np.abs(v).max(axis=1) > self.v_max
        if not high.any():
            self.over_count = 0
            return
        for j, h in enumerate(high):
            self.over_count = self.over_count + 1 if h else 0
            if self.over_count >= self.sustain:
                self._halt(m0 + j, "sustained overvoltage")
                return

    def _log(self, ms, v, i, u, z0, z1):
        """Write trace rows for the steps ``ms`` that fall on the logging grid."""
        sel = ms % self.log_every == 0
        if not sel.any():
            return
        ms, v, i, u, z0, z1 = ms[sel], v[sel], i[sel], u[sel], z0[sel], z1[sel]
        rows = ms // self.log_every
        res = _balance(z0, z1, u, self.wgt_e, self.r_loss, self.src_idx, self.dt)
        ok = np.array([(mm not in self.switched_at) and (mm - 1 not in self.switched_at) for mm in ms])
        if ok.any():
            self.flags["max_balance_residual"] = max(self.flags["max_balance_residual"],
                                                     float(np.abs(res[ok]).max()))
        self.t_log[rows] = ms * self.dt
        frames = np.array([rt.vsg.delta if rt.vsg is not None else rt.phi for rt in self.runs])
        r = np.exp(-1j * frames)
        vl, il = v * r, i * r
        s = v * i.conj()
        tr = self.traces
        tr["v_d"][rows], tr["v_q"][rows] = vl.real, vl.imag
        tr["i_d"][rows], tr["i_q"][rows] = il.real, il.imag
        tr["v_mag"][rows], tr["i_mag"][rows] = np.abs(v), np.abs(i)
        tr["p"][rows], tr["q"][rows] = s.real, s.imag
        for k, rt in enumerate(self.runs):
            tr["m_a"][rows, k] = rt.m_buf[ms % self.n_pp, 0]
            tr["active"][rows, k] = float(rt.sampler.active)
        self.grid["balance_residual"][rows] = res
        self.grid["v_avg"][rows] = np.abs(v).mean(axis=1)
        self.grid["q_spread"][rows] = s.imag.max(axis=1) - s.imag.min(axis=1)
        vb = z0[:, self.net.nc + self.net.ng + self.net.nl:]
        self.grid["load"][rows] = (np.abs(vb) ** 2) @ self.g_bus

    # ------------------------------------------------------------------
    # idle fast path: every converter holds its phasor, so whole carrier
    # periods can be propagated at once and gated in bulk
    CHUNK = 2000

    def _fast_ok(self, m):
        if self.controller != "snn" or self.record_rasters or m % self.n_pp:
            return False
        if m in self.schedule:
            return False
        return all(not rt.sampler.active and rt.warm == 0 for rt in self.runs)

    def _idle_chunk(self, m):
        nc, conv = self.nc, self.topo.converters
        nxt_event = min([k for k in self.schedule if k > m], default=self.n_steps + 1)
        n = min(self.CHUNK, nxt_event - m, self.n_steps + 1 - m)
        if n < self.n_pp:
            return m
        idx = m + np.arange(n)
        rot = np.exp(1j * self.wb * self.dt * idx)
        rot_mid = (rot * self._half).conj()
        n_per = n // self.n_pp
        u = np.empty((n, self.net.n_in), dtype=complex)
        u[:, nc:] = self.grid_u
        m_abc = np.empty((nc, n, 3))
        esv_after = []
        for k, rt in enumerate(self.runs):
            m_abc[k] = (rt.hold * rot[:, None] * PHASE_SHIFT).real
            per = m_abc[k, : n_per * self.n_pp].reshape(n_per, self.n_pp, 3)
            mod = np.repeat(per, self.oversample, axis=1)
            duty = (mod > self.gate_carrier[None, :, None]).mean(axis=1)
            sv = conv[k].e_max * ((2.0 * duty - 1.0) @ SV)
            seq = np.concatenate([[rt.e_sv], sv])
            esv_after.append(seq)
            u[:, k] = seq[np.arange(n) // self.n_pp] * rot_mid
        zs = _propagate(self.ad, self.bd, self.z, u)
        v, i = self._measure(zs[:-1])
        cut = n
        if not np.all(np.isfinite(zs)):
            cut = int(np.flatnonzero(~np.isfinite(zs).all(axis=1))[0]) - 1
        if self.frt["runtime_limit"]:
            over = np.flatnonzero((np.abs(zs[1:, :nc]) > self.i_max).any(axis=1))
            if len(over):
                cut = min(cut, int(over[0]))
        for k, rt in enumerate(self.runs):
            r = np.exp(-1j * rt.phi)
            vl, il = v[:cut, k] * r, i[:cut, k] * r
            xs = np.column_stack([vl.real, vl.imag, il.real, il.imag])
            cut = min(cut, rt.sampler.scan_idle(xs))
        if cut <= 0:
            return m
        for k, rt in enumerate(self.runs):
            r = np.exp(-1j * rt.phi)
            vl, il = v[:cut, k] * r, i[:cut, k] * r
            rt.sampler.advance_idle(np.column_stack([vl.real, vl.imag, il.real, il.imag]))
            tail = idx[:cut] % self.n_pp
            rt.m_buf[tail[-self.n_pp:]] = m_abc[k, :cut][-self.n_pp:]
            # the duty in force after the last accepted sample
            done = (m + cut) // self.n_pp - m // self.n_pp
            rt.e_sv = esv_after[k][done]
            rt.act_off_steps += cut
        self._check(m, v[:cut], i[:cut])
        stop_at = self.last_step if self._stop else None
        upto = cut if stop_at is None else stop_at - m + 1
        self._log(idx[:upto], v[:upto], i[:upto], u[:upto], zs[:upto], zs[1: upto + 1])
        self.z = zs[cut].copy()
        return m + cut

    def _finish(self) -> TraceBundle:
        runs = self.runs
        for rt in runs:
            rt.sampler.close((self.last_step + 1) * self.dt)
            if self.record_dataset:
                self._flush_segment(rt)
            self._close_event_activity(rt)
            if rt.vsg is not None:
                self.flags["modulation_saturated"] += rt.vsg.saturated
        return TraceBundle(
            scenario=self.scn.name, controller=self.controller, config=self.scn.config,
            dt=self.dt, t=self.t_log, conv_names=[rt.name for rt in runs],
            traces=self.traces, grid=self.grid,
            events=[rt.sampler.events for rt in runs],
            activity=[_activity_summary(rt) for rt in runs],
            flags=self.flags, metrics={"horizon": (self.last_step + 1) * self.dt},
            datasets=[rt.segments for rt in runs],
            rasters=[rt.raster for rt in runs],
            pwm=[np.array(rt.pwm_bits) for rt in runs],
        )

    # ------------------------------------------------------------------
    def _apply(self, d, grid_u, runs):
        topo = self.topo
        if d.kind == "load_step":
            topo.bus(d.target).g_load = float(d.value)
        elif d.kind == "line_outage":
            topo.line(d.target).closed = False
            if not topo.is_connected():
                raise SimulationAborted(f"outage of {d.target} splits the network")
        elif d.kind == "grid_sag":
            for k, g in enumerate(topo.grids):
                if g.name == d.target:
                    grid_u[k] = float(d.value)
        elif d.kind == "param_mismatch":
            obj, attr = d.target.split(".")
            for k, c in enumerate(topo.converters):
                if c.name == obj:
                    if hasattr(self.vsg[k], attr):
                        setattr(self.vsg[k], attr, float(d.value))
                    else:
                        setattr(c, attr, float(d.value))
            self.net._cache.clear()
        logger.debug("applied %s on %s at t=%.4f", d.kind, d.target, d.t)

    def _inputs(self, v, i, rot_net):
        """Normalised (v_abc, i_abc) at the current instant."""
        va = (v * rot_net * PHASE_SHIFT).real / self.v_norm
        ia = (i * rot_net * PHASE_SHIFT).real / self.i_norm
        return np.concatenate([va, ia])

    def _encode(self, x, m, rt):
        if np.any(np.abs(x) > 1.0):
            rt.clamped += int(np.count_nonzero(np.abs(x) > 1.0))
            x = np.clip(x, -1.0, 1.0)
        return x > self.enc_carrier[m % self.n_enc]

    def _record(self, rt, active, v, i, rot_net, m_abc, m, mph):
        if active:
            if not rt.seg_x:
                rt.hold = mph  # latched at onset, like the runtime hold
            x = self._inputs(v, i, rot_net)
            rt.seg_x.append(self._encode(x, m, rt))
            target = m_abc
            if self.residual:
                target = m_abc - (rt.hold * rot_net * PHASE_SHIFT).real
            rt.seg_y.append(target)
        elif rt.seg_x:
            self._flush_segment(rt)

    def _flush_segment(self, rt):
        if not rt.seg_x:
            return
        x = np.array(rt.seg_x, dtype=float)
        y = np.array(rt.seg_y)
        mask = np.ones(len(x))
        mask[: self.warmup] = 0.0
        rt.segments.append(TrainingBatch(x, y, self.dt, mask))
        rt.seg_x, rt.seg_y = [], []

    def _snn_sample(self, rt, k, active, v, i, rot_net, m):
        hold_abc = (rt.hold * rot_net * PHASE_SHIFT).real
        n_layers = len(rt.model.sizes)
        if not active:
            if rt.warm:
                self._close_event_activity(rt)
                # event just ended: keep the fundamental of the last applied output
                if rt.u_hist:
                    rt.hold = complex(np.mean(rt.u_hist[-self.hold_len:]))
                    hold_abc = (rt.hold * rot_net * PHASE_SHIFT).real
                rt.warm = 0
                rt.u_hist = []
            rt.act_off_steps += 1
            return hold_abc
        if rt.warm == 0:
            if self.reconfigured and self.adapted is not None and rt.model is not self.adapted[k]:
                rt.model = self.adapted[k]
                rt.snn = OnlineSnn(rt.model)
                logger.info("%s switched to adapted model", rt.name)
            rt.snn.reset()
        rt.warm += 1
        x = self._inputs(v, i, rot_net)
        bits = self._encode(x, m, rt)
        u_out = rt.snn.step(bits)
        rt.act_on_steps += 1
        counts = rt.snn.active_counts(bits)
        rt.act_on_sum += counts
        rt.ev_steps += 1
        rt.ev_sum = counts.copy() if rt.ev_sum is None else rt.ev_sum + counts
        rt.spikes_on += np.array([s.sum() for s in rt.snn.last_spikes])
        if self.record_rasters:
            rt.raster.append((m, bits.copy(), [s.copy() for s in rt.snn.last_spikes]))
        if rt.warm <= self.warmup:
            return hold_abc
        if self.residual:
            u_out = u_out + hold_abc
        rt.u_hist.append(complex(SV @ u_out) * rot_net.conjugate())
        if len(rt.u_hist) > 4 * self.hold_len:
            del rt.u_hist[: len(rt.u_hist) - self.hold_len]
        return u_out

    def _close_event_activity(self, rt):
        if rt.ev_steps:
            rt.ev_log.append((rt.ev_steps, rt.ev_sum.tolist()))
        rt.ev_steps, rt.ev_sum = 0, None

    def _period_sv(self, rt, e_max):
        """Decode the finished period's modulation into duties; return e space vector."""
        if self.record_rasters:
            mod = np.repeat(rt.m_buf, self.oversample, axis=0)
            rt.pwm_bits.append((mod > self.gate_carrier[:, None]).T)
        return e_max * complex(SV @ (2.0 * self._duties(rt.m_buf) - 1.0))

    def _runtime_limit(self, z, u):
        """Pull back terminal voltages whose next-step current would exceed i_max.

        The plant update is exact for the held input, so clamping the predicted
        next current bounds the actual one.
        """
        ad, bd = self.ad, self.bd
        z_pred = ad @ z + bd @ u
        for k, c in enumerate(self.topo.converters):
            i_next = z_pred[k]
            if abs(i_next) <= c.i_max:
                continue
            target = frt_limit(i_next, c.i_max)
            gain = bd[k, k]
            u[k] += (target - i_next) / gain
            z_pred = ad @ z + bd @ u


def _per_conv(models, n):
    if models is None:
        return None
    if isinstance(models, SnnModel):
        return [models] * n
    models = list(models)
    if len(models) == 1:
        return models * n
    if len(models) != n:
        raise ValueError(f"{len(models)} models for {n} converters")
    return models


def _copy_topology(topo):
    return copy.deepcopy(topo)


@njit(cache=True)
def _propagate(ad, bd, z0, u):
    n_steps = u.shape[0]
    n = z0.shape[0]
    out = np.empty((n_steps + 1, n), dtype=np.complex128)
    out[0] = z0
    for t in range(n_steps):
        zt = out[t]
        ut = u[t]
        for r in range(n):
            acc = 0j
            for c in range(n):
                acc += ad[r, c] * zt[c]
            for c in range(ut.shape[0]):
                acc += bd[r, c] * ut[c]
            out[t + 1, r] = acc
    return out


def _energy_vectors(net: NetworkModel):
    t = net.topo
    w = np.zeros(net.n)
    r = np.zeros(net.n)
    for k, c in enumerate(t.converters):
        w[net.i_conv(k)] = c.x_f
        r[net.i_conv(k)] = c.r_f
    for k, g in enumerate(t.grids):
        w[net.i_grid(k)] = g.x
        r[net.i_grid(k)] = g.r
    for k, ln in enumerate(t.lines):
        w[net.i_line(k)] = ln.x
        r[net.i_line(k)] = ln.r if ln.closed else 0.0
    for k, b in enumerate(t.buses):
        w[net.v_bus(k)] = b.b_shunt
        r[net.v_bus(k)] = b.g_load
    src = np.arange(net.nc + net.ng)
    return 0.5 * w / net.wb, r, src


def _balance(z0, z1, u, wgt_e, r_loss, src, dt):
    """Stored-energy change minus trapezoidal net power, per row of (L, n) states."""
    def net_power(z):
        return np.real(u * np.conj(z[:, src])).sum(axis=1) - (np.abs(z) ** 2) @ r_loss

    dw = ((np.abs(z1) ** 2 - np.abs(z0) ** 2) @ wgt_e) / dt
    return dw - 0.5 * (net_power(z0) + net_power(z1))


def _activity_summary(rt):
    return {
        "steps_on": rt.act_on_steps,
        "steps_off": rt.act_off_steps,
        "active_sum_on": rt.act_on_sum.tolist(),
        "active_sum_off": rt.act_off_sum.tolist(),
        "hidden_spikes_on": rt.spikes_on.tolist(),
        "events": len(rt.sampler.events),
        "per_event": [{"steps": n, "active_sum": a} for n, a in rt.ev_log],
        "layer_sizes": list(rt.model.sizes) if rt.model is not None else None,
        "clamped_inputs": rt.clamped,
    }


def run_scenario(scenario: Scenario, controller: str = "vsg_direct", **kwargs) -> TraceBundle:
    return Simulation(scenario, controller, **kwargs).run()
