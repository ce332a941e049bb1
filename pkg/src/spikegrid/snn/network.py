"""Layered spiking network: double-exponential synapses feeding LIF neurons.

Hidden layers spike and hard-reset; the output layer is a leaky integrator
whose membrane is read out directly and never spikes. All layer operations
are written over whole ``(batch, time, neurons)`` tensors: the synaptic
filters and the LIF recursion are compiled time loops, the weight products
are single matrix multiplications.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .lif import ConfigError, LifParams

DEFAULT_SIZES = (6, 256, 256, 3)


@dataclass(frozen=True)
class SynapseParams:
    tau_rise: float
    tau_decay: float

    def __post_init__(self):
        if not (0 < self.tau_rise < self.tau_decay):
            raise ConfigError("synapse needs 0 < tau_rise < tau_decay")

    @classmethod
    def for_membrane(cls, tau_m: float) -> "SynapseParams":
        return cls(tau_rise=tau_m / 10.0, tau_decay=tau_m / 2.0)


def kernel_coefficients(syn: SynapseParams, dt: float) -> tuple[float, float, float]:
    """Return ``(alpha_decay, alpha_rise, kappa)``.

    The discrete kernel ``kappa * (alpha_d**n - alpha_r**n)`` has unit area,
    so a presynaptic spike rate ``r`` (spikes per step) settles to a trace of
    ``r``.
    """
    a_d = math.exp(-dt / syn.tau_decay)
    a_r = math.exp(-dt / syn.tau_rise)
    area = 1.0 / (1.0 - a_d) - 1.0 / (1.0 - a_r)
    return a_d, a_r, 1.0 / area


def kernel_peak(syn: SynapseParams, dt: float) -> float:
    """Largest value of the synaptic trace after one isolated spike."""
    a_d, a_r, kappa = kernel_coefficients(syn, dt)
    n = np.arange(0, int(20 * syn.tau_decay / dt) + 2)
    return float(kappa * np.max(a_d ** n - a_r ** n))


def membrane_kernel(syn: SynapseParams, p: LifParams, n_steps: int) -> np.ndarray:
    """Closed-form membrane response (above rest) to one unit-weight input spike.

    With ``rho = 1 - dt/tau_m`` and the spike at step 0, the sub-threshold
    membrane is ``(beta kappa / g_L) * sum_k rho**(n-k) (a_d**k - a_r**k)``,
    a sum of geometric series.
    """
    a_d, a_r, kappa = kernel_coefficients(syn, p.dt)
    rho = 1.0 - p.beta
    n = np.arange(n_steps, dtype=float)

    def series(a):
        return a * (a ** n - rho ** n) / (a - rho)

    return (p.beta * kappa / p.g_l) * (series(a_d) - series(a_r))


def surrogate(x: np.ndarray, slope: float) -> np.ndarray:
    """Smooth spike function 0.5 + 0.5 k x / (1 + k|x|)."""
    return 0.5 + 0.5 * slope * x / (1.0 + slope * np.abs(x))


def surrogate_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return 0.5 * slope / (1.0 + slope * np.abs(x)) ** 2


@njit(cache=True)
def _double_exp(x, a_d, a_r, kappa, reverse):
    b, t_len, n = x.shape
    out = np.empty_like(x)
    yd = np.zeros(n)
    yr = np.zeros(n)
    for i in range(b):
        yd[:] = 0.0
        yr[:] = 0.0
        for k in range(t_len):
            t = t_len - 1 - k if reverse else k
            for j in range(n):
                yd[j] = a_d * yd[j] + x[i, t, j]
                yr[j] = a_r * yr[j] + x[i, t, j]
                out[i, t, j] = kappa * (yd[j] - yr[j])
    return out


@njit(cache=True)
def _single_exp(x, a, gain, reverse):
    b, t_len, n = x.shape
    out = np.empty_like(x)
    y = np.zeros(n)
    for i in range(b):
        y[:] = 0.0
        for k in range(t_len):
            t = t_len - 1 - k if reverse else k
            for j in range(n):
                y[j] = a * y[j] + gain * x[i, t, j]
                out[i, t, j] = y[j]
    return out


def synaptic_filter(s: np.ndarray, a_d: float, a_r: float, kappa: float) -> np.ndarray:
    """Postsynaptic trace along axis 1 of a ``(B, T, N)`` spike tensor."""
    return _double_exp(np.ascontiguousarray(s, dtype=float), a_d, a_r, kappa, False)


def synaptic_filter_adjoint(g: np.ndarray, a_d: float, a_r: float, kappa: float) -> np.ndarray:
    return _double_exp(np.ascontiguousarray(g, dtype=float), a_d, a_r, kappa, True)


def _reverse_filter(g: np.ndarray, a: float) -> np.ndarray:
    return _single_exp(np.ascontiguousarray(g, dtype=float), a, 1.0, True)


def _outer_sum(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``sum_{b,t} g[b,t,:] x[b,t,:]^T`` as one matmul."""
    return g.reshape(-1, g.shape[2]).T @ x.reshape(-1, x.shape[2])


@dataclass
class SnnModel:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    hidden: LifParams
    output: LifParams
    synapse: SynapseParams
    slope: float = 10.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.weights) != len(self.sizes) - 1:
            raise ConfigError("one weight matrix per layer transition is required")
        for k, w in enumerate(self.weights):
            if w.shape != (self.sizes[k + 1], self.sizes[k]):
                raise ConfigError(f"weight {k} has shape {w.shape}, expected "
                                  f"{(self.sizes[k + 1], self.sizes[k])}")
            if not np.all(np.isfinite(w)):
                raise ConfigError(f"weight {k} is not finite")
        if self.hidden.dt != self.output.dt:
            raise ConfigError("hidden and output layers must share dt")

    output_spikes = False  # the readout layer never fires

    @property
    def dt(self) -> float:
        return self.hidden.dt

    @property
    def n_neurons(self) -> int:
        return int(sum(self.sizes))

    def copy(self) -> "SnnModel":
        return replace(self, weights=[w.copy() for w in self.weights], meta=dict(self.meta))

    @classmethod
    def build(cls, sizes=DEFAULT_SIZES, dt: float = 1e-5, tau_m: float = 1e-3,
              tau_out: float | None = None, v_th: float = 1.0, slope: float = 10.0,
              seed: int = 0, init: str = "normal", gain: float = 1.0,
              synapse: SynapseParams | None = None) -> "SnnModel":
        """Create a model; ``init='zeros'`` gives an all-zero weight set."""
        hidden = LifParams(tau_m=tau_m, v_th=v_th, dt=dt)
        output = LifParams(tau_m=tau_out or tau_m, v_th=v_th, dt=dt)
        syn = synapse or SynapseParams.for_membrane(tau_m)
        rng = np.random.default_rng(seed)
        weights = []
        for k in range(len(sizes) - 1):
            shape = (sizes[k + 1], sizes[k])
            if init == "zeros" or (init == "normal" and k == len(sizes) - 2):
                # readout starts silent so training begins from u = 0
                weights.append(np.zeros(shape))
            else:
                weights.append(rng.normal(0.0, gain / math.sqrt(sizes[k]), shape))
        return cls(tuple(sizes), weights, hidden, output, syn, slope, seed)

    def calibrate(self, spikes, mean_drive: float = 0.8, spread: float = 1.0) -> "SnnModel":
        """Rescale hidden weights from a sample of input spikes, in place.

        Each hidden layer gets weights ``c + a z`` (``z`` standard normal,
        seeded) with ``c`` chosen so the average current equals
        ``mean_drive * v_th`` and ``a`` so the neuron-to-neuron spread of mean
        currents is ``spread * v_th``. Without this, deep layers start silent.
        """
        x = np.asarray(spikes, dtype=float)
        if x.ndim == 2:
            x = x[None]
        rng = np.random.default_rng(self.seed + 1)
        a_d, a_r, kappa = kernel_coefficients(self.synapse, self.dt)
        s = x
        th = self.hidden.v_th * self.hidden.g_l
        scales = []
        for k in range(len(self.weights)):
            psp = synaptic_filter(s, a_d, a_r, kappa)
            p_mean = psp.reshape(-1, psp.shape[2]).mean(axis=0)
            tot = float(p_mean.sum())
            if tot <= 0:
                raise ValueError(f"calibrate: layer {k} receives no spikes")
            scales.append(th / tot)
            if k == len(self.weights) - 1:
                break
            z = rng.standard_normal(self.weights[k].shape)
            centred = z @ p_mean
            scale = spread * th / max(float(np.std(centred)), 1e-12)
            w = scale * z
            w += (mean_drive * th - float(np.mean(w @ p_mean))) / tot
            self.weights[k] = w
            _, s = lif_forward(psp @ w.T, self.hidden, self.slope)
        self.meta["weight_scale"] = scales
        return self

    # ------------------------------------------------------------------
    def forward(self, spikes, soft: bool = False, keep: bool = False):
        """Run a batch of input spike tensors.

        ``spikes`` is ``(B, T, n_in)`` (a 2-D ``(T, n_in)`` array is treated as
        a batch of one). Returns ``(u, activity, cache)`` where ``u`` is
        ``(B, T, n_out)``, ``activity`` lists per-layer spike tensors for the
        hidden layers, and ``cache`` is only filled when ``keep`` is set.
        """
        x = np.asarray(spikes, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.shape[2] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[2]} channels, model expects {self.sizes[0]}")
        a_d, a_r, kappa = kernel_coefficients(self.synapse, self.dt)
        cache = {"inputs": [], "vpre": [], "spikes": []}
        s = x
        activity = []
        n_hidden = len(self.weights) - 1
        for k in range(n_hidden):
            psp = synaptic_filter(s, a_d, a_r, kappa)
            cur = psp @ self.weights[k].T
            vpre, s = lif_forward(cur, self.hidden, self.slope, soft)
            activity.append(s)
            if keep:
                cache["inputs"].append(psp)
                cache["vpre"].append(vpre)
                cache["spikes"].append(s)
        psp = synaptic_filter(s, a_d, a_r, kappa)
        cur = psp @ self.weights[-1].T
        u = leaky_readout(cur, self.output)
        if keep:
            cache["inputs"].append(psp)
        return u, activity, cache

    def gradients(self, spikes, target, mask=None, soft: bool = False):
        """Loss and weight gradients by backpropagation through time.

        The loss is the masked mean of ``(target - u)**2`` over samples and
        output channels. Spikes are differentiated through
        :func:`surrogate_grad`; with ``soft=True`` the forward pass also uses
        the smooth spike function, making the result an exact gradient. With
        hard spikes the gradient through the reset is dropped.
        """
        u, _, cache = self.forward(spikes, soft=soft, keep=True)
        target = np.asarray(target, dtype=float)
        if target.ndim == 2:
            target = target[None]
        if mask is None:
            mask = np.ones(u.shape[:2])
        mask = np.asarray(mask, dtype=float)
        if mask.ndim == 1:
            mask = mask[None]
        denom = mask.sum() * u.shape[2]
        err = (u - target) * mask[:, :, None]
        loss = float((err * (u - target)).sum() / denom) if denom else 0.0
        if not denom:
            return loss, [np.zeros_like(w) for w in self.weights], u
        a_d, a_r, kappa = kernel_coefficients(self.synapse, self.dt)
        grads = [None] * len(self.weights)
        g_u = 2.0 * err / denom
        rho = 1.0 - self.output.beta
        g_cur = (self.output.beta / self.output.g_l) * _reverse_filter(g_u, rho)
        for k in range(len(self.weights) - 1, -1, -1):
            psp = cache["inputs"][k]
            grads[k] = _outer_sum(g_cur, psp)
            if k == 0:
                break
            g_psp = g_cur @ self.weights[k]
            g_s = synaptic_filter_adjoint(g_psp, a_d, a_r, kappa)
            g_cur = lif_backward(g_s, cache["vpre"][k - 1], cache["spikes"][k - 1],
                                 self.hidden, self.slope, soft)
        return loss, grads, u

    def loss(self, spikes, target, mask=None, soft: bool = False) -> float:
        u, _, _ = self.forward(spikes, soft=soft)
        target = np.asarray(target, dtype=float)
        if target.ndim == 2:
            target = target[None]
        if mask is None:
            mask = np.ones(u.shape[:2])
        mask = np.atleast_2d(np.asarray(mask, dtype=float))
        denom = mask.sum() * u.shape[2]
        return float((((u - target) ** 2) * mask[:, :, None]).sum() / denom) if denom else 0.0


@njit(cache=True)
def _lif_forward_kernel(drive, rho, v_rest, v_th, v_reset, slope, soft):
    b, t_len, n = drive.shape
    vpre = np.empty_like(drive)
    s_out = np.empty_like(drive)
    v = np.empty(n)
    for i in range(b):
        v[:] = v_rest
        for t in range(t_len):
            for j in range(n):
                vp = rho * v[j] + drive[i, t, j]
                x = vp - v_th
                if soft:
                    s = 0.5 + 0.5 * slope * x / (1.0 + slope * abs(x))
                else:
                    s = 1.0 if x >= 0.0 else 0.0
                v[j] = vp * (1.0 - s) + v_reset * s
                vpre[i, t, j] = vp
                s_out[i, t, j] = s
    return vpre, s_out


@njit(cache=True)
def _lif_backward_kernel(g_s, vpre, s, rho, v_th, v_reset, slope, soft):
    b, t_len, n = g_s.shape
    g_vpre = np.empty_like(g_s)
    carry = np.empty(n)
    for i in range(b):
        carry[:] = 0.0
        for t in range(t_len - 1, -1, -1):
            for j in range(n):
                x = vpre[i, t, j] - v_th
                ds = 0.5 * slope / (1.0 + slope * abs(x)) ** 2
                through = 1.0 - s[i, t, j]
                if soft:
                    through += (v_reset - vpre[i, t, j]) * ds
                gv = carry[j] * through + g_s[i, t, j] * ds
                g_vpre[i, t, j] = gv
                carry[j] = rho * gv
    return g_vpre


def lif_forward(cur: np.ndarray, p: LifParams, slope: float, soft: bool = False):
    """Step the LIF recursion over axis 1 of a ``(B, T, N)`` current.

    Returns the pre-reset membrane and the spike tensor.
    """
    drive = np.ascontiguousarray(p.beta * (p.v_rest + cur / p.g_l))
    return _lif_forward_kernel(drive, 1.0 - p.beta, p.v_rest, p.v_th, p.v_reset,
                               float(slope), bool(soft))


def lif_backward(g_s: np.ndarray, vpre: np.ndarray, s: np.ndarray, p: LifParams,
                 slope: float, soft: bool = False) -> np.ndarray:
    """Adjoint of :func:`lif_forward`; returns the gradient w.r.t. the current.

    With hard spikes the gradient through the reset is dropped, since it
    compounds without bound across consecutive spikes.
    """
    g = _lif_backward_kernel(np.ascontiguousarray(g_s), vpre, s, 1.0 - p.beta, p.v_th,
                             p.v_reset, float(slope), bool(soft))
    return g * (p.beta / p.g_l)


def leaky_readout(cur: np.ndarray, p: LifParams) -> np.ndarray:
    """Non-spiking membrane: ``u[t] = (1-beta) u[t-1] + beta (v_rest + I/g_L)``."""
    drive = p.beta * (p.v_rest + cur / p.g_l)
    return _single_exp(np.ascontiguousarray(drive), 1.0 - p.beta, 1.0, False)


class OnlineSnn:
    """Sample-by-sample inference with persistent state, for closed loops."""

    def __init__(self, model: SnnModel):
        self.model = model
        self.a_d, self.a_r, self.kappa = kernel_coefficients(model.synapse, model.dt)
        # a neuron counts as active when it fires or receives a presynaptic
        # spike through a nonzero weight; dense layers skip the mask product
        self._links = [None if np.all(w != 0) else (w != 0).astype(float) for w in model.weights]
        self.reset()

    def reset(self) -> None:
        m = self.model
        self.trace_d = [np.zeros(n) for n in m.sizes[:-1]]
        self.trace_r = [np.zeros(n) for n in m.sizes[:-1]]
        self.v = [np.full(n, m.hidden.v_rest) for n in m.sizes[1:-1]]
        self.u = np.zeros(m.sizes[-1])
        self.spike_counts = np.zeros(len(m.sizes) - 2, dtype=np.int64)
        self.last_spikes = [np.zeros(n, dtype=bool) for n in m.sizes[1:-1]]
        self.last_active = np.zeros(len(m.sizes))

    def _received(self, k: int, s: np.ndarray) -> np.ndarray | float:
        if self._links[k] is None:
            return float(s.any())
        return (self._links[k] @ s) > 0

    def active_counts(self, x_bits: np.ndarray | None = None) -> np.ndarray:
        """Active neurons per layer at the last step (inputs: spiking channels)."""
        return self.last_active.copy()

    def step(self, x_bits: np.ndarray) -> np.ndarray:
        m = self.model
        p = m.hidden
        s = np.asarray(x_bits, dtype=float)
        act = self.last_active
        act[0] = s.sum()
        for k in range(len(m.weights)):
            recv = self._received(k, s)
            self.trace_d[k] = self.a_d * self.trace_d[k] + s
            self.trace_r[k] = self.a_r * self.trace_r[k] + s
            cur = m.weights[k] @ (self.kappa * (self.trace_d[k] - self.trace_r[k]))
            if k == len(m.weights) - 1:
                po = m.output
                self.u = (1.0 - po.beta) * self.u + po.beta * (po.v_rest + cur / po.g_l)
                act[k + 1] = np.sum(np.broadcast_to(recv, self.u.shape))
                break
            vp = (1.0 - p.beta) * self.v[k] + p.beta * (p.v_rest + cur / p.g_l)
            fired = vp >= p.v_th
            self.v[k] = np.where(fired, p.v_reset, vp)
            self.last_spikes[k] = fired
            self.spike_counts[k] += int(fired.sum())
            act[k + 1] = np.count_nonzero(fired | np.broadcast_to(recv > 0, fired.shape))
            s = fired.astype(float)
        return self.u.copy()
