"""Average-value dq network: converter filters, lines, shunt buses, a Thevenin grid.

Everything is per-unit on the converter rating with peak-value bases, in a
frame rotating at nominal frequency. With complex state ``z`` (branch
currents, then bus voltages) the network obeys ``dz/dt = A z + B u`` where
``u`` stacks the converter terminal voltages and grid EMFs. Inputs are held
over a step, so the exact zero-order-hold discretisation is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm


@dataclass
class Bus:
    name: str
    b_shunt: float = 0.02  # capacitive susceptance, pu
    g_load: float = 0.0  # resistive load conductance, pu


@dataclass
class Line:
    name: str
    a: str
    b: str
    r: float
    x: float
    closed: bool = True


@dataclass
class Converter:
    name: str
    bus: str
    r_f: float = 0.005
    x_f: float = 0.10
    e_max: float = 1.25  # terminal voltage at unit modulation (half dc link)
    i_max: float = 1.2


@dataclass
class GridSource:
    name: str
    bus: str
    r: float = 0.01
    x: float = 0.10
    v: float = 1.0


@dataclass
class Topology:
    buses: list[Bus]
    lines: list[Line] = field(default_factory=list)
    converters: list[Converter] = field(default_factory=list)
    grids: list[GridSource] = field(default_factory=list)

    def __post_init__(self):
        names = [b.name for b in self.buses]
        if len(set(names)) != len(names):
            raise ValueError("duplicate bus names")
        for ln in self.lines:
            if ln.a not in names or ln.b not in names:
                raise ValueError(f"line {ln.name} references an unknown bus")
            if not (ln.r > 0 and ln.x > 0):
                raise ValueError(f"line {ln.name} needs positive impedance")
        for c in self.converters:
            if c.bus not in names:
                raise ValueError(f"converter {c.name} references an unknown bus")
            if not (c.r_f > 0 and c.x_f > 0):
                raise ValueError(f"converter {c.name} needs positive filter impedance")
        for g in self.grids:
            if g.bus not in names:
                raise ValueError(f"grid {g.name} references an unknown bus")
        for b in self.buses:
            if not b.b_shunt > 0:
                raise ValueError(f"bus {b.name} needs a positive shunt capacitance")
            if b.g_load < 0:
                raise ValueError(f"bus {b.name} has negative load")

    def bus_index(self, name: str) -> int:
        return [b.name for b in self.buses].index(name)

    def line(self, name: str) -> Line:
        for ln in self.lines:
            if ln.name == name:
                return ln
        raise KeyError(name)

    def bus(self, name: str) -> Bus:
        return self.buses[self.bus_index(name)]

    def is_connected(self) -> bool:
        """Every bus reachable from bus 0 through closed lines."""
        adj = {b.name: set() for b in self.buses}
        for ln in self.lines:
            if ln.closed:
                adj[ln.a].add(ln.b)
                adj[ln.b].add(ln.a)
        seen, todo = set(), [self.buses[0].name]
        while todo:
            n = todo.pop()
            if n in seen:
                continue
            seen.add(n)
            todo.extend(adj[n] - seen)
        return len(seen) == len(self.buses)

    def key(self) -> tuple:
        return (tuple((b.b_shunt, b.g_load) for b in self.buses),
                tuple((ln.closed, ln.r, ln.x) for ln in self.lines),
                tuple((c.r_f, c.x_f) for c in self.converters),
                tuple((g.r, g.x) for g in self.grids))


class NetworkModel:
    """State-space form of a :class:`Topology` plus its discretisation cache."""

    def __init__(self, topo: Topology, dt: float, omega_base: float = 2 * math.pi * 50):
        self.topo = topo
        self.dt = dt
        self.wb = omega_base
        self.nc = len(topo.converters)
        self.ng = len(topo.grids)
        self.nl = len(topo.lines)
        self.nb = len(topo.buses)
        self.n = self.nc + self.ng + self.nl + self.nb
        self.n_in = self.nc + self.ng
        self._cache: dict = {}
        self.conv_bus = np.array([topo.bus_index(c.bus) for c in topo.converters], dtype=int)
        self.grid_bus = np.array([topo.bus_index(g.bus) for g in topo.grids], dtype=int)

    # index helpers into the complex state
    def i_conv(self, k: int) -> int:
        return k

    def i_grid(self, k: int) -> int:
        return self.nc + k

    def i_line(self, k: int) -> int:
        return self.nc + self.ng + k

    def v_bus(self, k: int) -> int:
        return self.nc + self.ng + self.nl + k

    def complex_system(self):
        t = self.topo
        wb = self.wb
        a = np.zeros((self.n, self.n), dtype=complex)
        b = np.zeros((self.n, self.n_in), dtype=complex)
        for k, c in enumerate(t.converters):
            r = self.i_conv(k)
            vb = self.v_bus(self.conv_bus[k])
            a[r, r] = -wb * c.r_f / c.x_f - 1j * wb
            a[r, vb] = -wb / c.x_f
            b[r, k] = wb / c.x_f
            a[vb, r] += wb / t.buses[self.conv_bus[k]].b_shunt
        for k, g in enumerate(t.grids):
            r = self.i_grid(k)
            vb = self.v_bus(self.grid_bus[k])
            a[r, r] = -wb * g.r / g.x - 1j * wb
            a[r, vb] = -wb / g.x
            b[r, self.nc + k] = wb / g.x
            a[vb, r] += wb / t.buses[self.grid_bus[k]].b_shunt
        for k, ln in enumerate(t.lines):
            r = self.i_line(k)
            if not ln.closed:
                continue
            ia, ib = t.bus_index(ln.a), t.bus_index(ln.b)
            a[r, r] = -wb * ln.r / ln.x - 1j * wb
            a[r, self.v_bus(ia)] = wb / ln.x
            a[r, self.v_bus(ib)] = -wb / ln.x
            a[self.v_bus(ia), r] -= wb / t.buses[ia].b_shunt
            a[self.v_bus(ib), r] += wb / t.buses[ib].b_shunt
        for k, bus in enumerate(t.buses):
            r = self.v_bus(k)
            a[r, r] += -wb * bus.g_load / bus.b_shunt - 1j * wb
        return a, b

    def discrete(self):
        """``(Ad, Bd)`` acting on complex vectors, cached per switching state."""
        key = self.topo.key()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        a, b = self.complex_system()
        n, m = self.n, self.n_in
        aug = np.zeros((n + m, n + m), dtype=complex)
        aug[:n, :n] = a
        aug[:n, n:] = b
        e = expm(aug * self.dt)
        out = (np.ascontiguousarray(e[:n, :n]), np.ascontiguousarray(e[:n, n:]))
        self._cache[key] = out
        return out

    def step(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        ad, bd = self.discrete()
        return ad @ z + bd @ u

    def apply_switching(self, z: np.ndarray) -> np.ndarray:
        """Zero the currents of open lines (breaker interruption)."""
        z = z.copy()
        for k, ln in enumerate(self.topo.lines):
            if not ln.closed:
                z[self.i_line(k)] = 0.0
        return z

    # ------------------------------------------------------------------
    # energy bookkeeping

    def stored_energy(self, z: np.ndarray) -> float:
        t = self.topo
        w = 0.0
        for k, c in enumerate(t.converters):
            w += c.x_f * abs(z[self.i_conv(k)]) ** 2
        for k, g in enumerate(t.grids):
            w += g.x * abs(z[self.i_grid(k)]) ** 2
        for k, ln in enumerate(t.lines):
            w += ln.x * abs(z[self.i_line(k)]) ** 2
        for k, bus in enumerate(t.buses):
            w += bus.b_shunt * abs(z[self.v_bus(k)]) ** 2
        return 0.5 * w / self.wb

    def power_terms(self, z: np.ndarray, u: np.ndarray) -> tuple[float, float, float]:
        """``(source power, series losses, load power)``."""
        t = self.topo
        src = 0.0
        for k in range(self.nc):
            src += (u[k] * np.conj(z[self.i_conv(k)])).real
        for k in range(self.ng):
            src += (u[self.nc + k] * np.conj(z[self.i_grid(k)])).real
        loss = 0.0
        for k, c in enumerate(t.converters):
            loss += c.r_f * abs(z[self.i_conv(k)]) ** 2
        for k, g in enumerate(t.grids):
            loss += g.r * abs(z[self.i_grid(k)]) ** 2
        for k, ln in enumerate(t.lines):
            if ln.closed:
                loss += ln.r * abs(z[self.i_line(k)]) ** 2
        load = 0.0
        for k, bus in enumerate(t.buses):
            load += bus.g_load * abs(z[self.v_bus(k)]) ** 2
        return src, loss, load

    def balance_residual(self, z0: np.ndarray, z1: np.ndarray, u: np.ndarray) -> float:
        """Trapezoidal power-balance residual over one step, in pu power."""
        s0, l0, d0 = self.power_terms(z0, u)
        s1, l1, d1 = self.power_terms(z1, u)
        dw = (self.stored_energy(z1) - self.stored_energy(z0)) / self.dt
        return dw - 0.5 * ((s0 - l0 - d0) + (s1 - l1 - d1))


def step_plant(model: NetworkModel, z: np.ndarray, duties: np.ndarray, theta: float,
               grid_emf: np.ndarray | None = None) -> np.ndarray:
    """Advance one step from per-phase duties (``(n_conv, 3)`` in [0, 1]).

    ``theta`` is the network-frame angle at which the averaged phase voltages
    are referred to dq.
    """
    from ..signals import abc_to_phasor

    duties = np.atleast_2d(np.asarray(duties, dtype=float))
    if np.any(duties < 0) or np.any(duties > 1):
        raise ValueError("duties must lie in [0, 1]")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("plant state is not finite")
    u = np.zeros(model.n_in, dtype=complex)
    for k, c in enumerate(model.topo.converters):
        m_abc = 2.0 * duties[k] - 1.0
        u[k] = c.e_max * abc_to_phasor(m_abc, theta)
    if model.ng:
        u[model.nc:] = grid_emf if grid_emf is not None else [g.v for g in model.topo.grids]
    return model.step(z, u)
