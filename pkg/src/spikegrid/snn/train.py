"""Supervised training of the output membrane against modulation targets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import SnnModel

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainingBatch:
    """Input spikes ``(T, 6)``, target modulation ``(T, 3)`` and a loss mask ``(T,)``."""

    spikes: np.ndarray
    target: np.ndarray
    dt: float
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes)
        self.target = np.asarray(self.target, dtype=float)
        if self.spikes.shape[0] != self.target.shape[0]:
            raise ValueError("input and target horizons differ")
        if self.mask is None:
            self.mask = np.ones(self.spikes.shape[0])
        self.mask = np.asarray(self.mask, dtype=float)

    @property
    def n_steps(self) -> int:
        return self.spikes.shape[0]


def stack_batches(batches: list[TrainingBatch]):
    """Zero-pad segments to a common length; padding is masked out."""
    t_max = max(b.n_steps for b in batches)
    n_in = batches[0].spikes.shape[1]
    n_out = batches[0].target.shape[1]
    x = np.zeros((len(batches), t_max, n_in))
    y = np.zeros((len(batches), t_max, n_out))
    mask = np.zeros((len(batches), t_max))
    for k, b in enumerate(batches):
        x[k, : b.n_steps] = b.spikes
        y[k, : b.n_steps] = b.target
        mask[k, : b.n_steps] = b.mask
    return x, y, mask


def split_batches(batches: list[TrainingBatch], length: int, warmup: int) -> list[TrainingBatch]:
    """Cut segments into chunks of ``length`` scored samples.

    Each chunk carries ``warmup`` extra leading samples, overlapping its
    predecessor, that are masked out so the network state can settle.
    """
    if length <= 0 or warmup < 0:
        raise ValueError("chunk length must be positive and warm-up non-negative")
    out = []
    for b in batches:
        for start in range(0, b.n_steps, length):
            lo = max(0, start - warmup)
            hi = min(b.n_steps, start + length)
            mask = b.mask[lo:hi].copy()
            mask[: start - lo] = 0.0
            if mask.sum() > 0:
                out.append(TrainingBatch(b.spikes[lo:hi], b.target[lo:hi], b.dt, mask))
    return out


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    scales: list[float] | None = None

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        scales = self.scales or [1.0] * len(params)
        for p, g, m, v, sc in zip(params, grads, self.m, self.v, scales):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= sc * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: SnnModel
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train(model: SnnModel, data: list[TrainingBatch], epochs: int = 100, lr: float = 2e-3,
          minibatch: int | None = None, seed: int | None = None, max_loss: float = 1e3,
          target_loss: float | None = None, log_every: int = 10,
          lr_final: float | None = None) -> TrainResult:
    """Train a copy of ``model`` with Adam; the input model is left untouched.

    Each epoch visits every segment once (in a seeded random order when
    ``minibatch`` splits them). ``losses`` holds the mean minibatch loss per
    epoch measured before that epoch's updates. Training stops early once an
    epoch loss falls below ``target_loss``. With ``lr_final`` the step size
    decays geometrically from ``lr`` to ``lr_final`` over the epochs.
    """
    if not data:
        raise ValueError("train: no batches")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    model = model.copy()
    rng = np.random.default_rng(model.seed if seed is None else seed)
    opt = Adam(lr=lr, scales=model.meta.get("weight_scale"))
    losses: list[float] = []
    size = minibatch or len(data)
    decay = (lr_final / lr) ** (1.0 / max(epochs - 1, 1)) if lr_final else 1.0
    for epoch in range(epochs):
        opt.lr = lr * decay ** epoch
        order = rng.permutation(len(data)) if size < len(data) else np.arange(len(data))
        epoch_loss, weight = 0.0, 0.0
        for start in range(0, len(data), size):
            chunk = [data[k] for k in order[start: start + size]]
            x, y, mask = stack_batches(chunk)
            loss, grads, _ = model.gradients(x, y, mask)
            if not np.isfinite(loss) or loss > max_loss:
                raise TrainingDiverged(
                    f"loss {loss!r} at epoch {epoch}",
                    {"epoch": epoch, "loss": loss, "weights": [w.copy() for w in model.weights],
                     "history": list(losses)},
                )
            n = mask.sum()
            epoch_loss += loss * n
            weight += n
            opt.update(model.weights, grads)
        losses.append(epoch_loss / weight)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.3e", epoch, losses[-1])
        if target_loss is not None and losses[-1] < target_loss:
            break
    model.meta.update({"epochs": len(losses), "lr": lr,
                       "final_loss": losses[-1] if losses else None})
    return TrainResult(model, losses)


def fine_tune_online(model: SnnModel, batch: TrainingBatch, lr: float = 5e-4,
                     window: int = 2000) -> TrainResult:
    """Single pass over one event, updating after every ``window`` samples.

    Each update uses the samples seen so far in the event, so the weights
    only ever depend on data that has already arrived.
    """
    model = model.copy()
    opt = Adam(lr=lr, scales=model.meta.get("weight_scale"))
    losses = []
    for end in range(window, batch.n_steps + window, window):
        end = min(end, batch.n_steps)
        x = batch.spikes[:end][None]
        y = batch.target[:end][None]
        mask = batch.mask[:end][None]
        loss, grads, _ = model.gradients(x, y, mask)
        losses.append(loss)
        opt.update(model.weights, grads)
        if end == batch.n_steps:
            break
    return TrainResult(model, losses)


def hebbian_update(weights: np.ndarray, pre: np.ndarray, post: np.ndarray, lr: float = 1e-4,
                   tau_plus: float = 20.0, tau_minus: float = 20.0, a_minus: float = 1.05,
                   w_max: float = 1.0) -> np.ndarray:
    """Experimental pair-based STDP on one layer.

    ``pre`` is ``(T, n_pre)`` and ``post`` ``(T, n_post)`` spike rasters;
    time constants are in steps. Potentiation when a presynaptic trace meets a
    postsynaptic spike, depression in the opposite order. Returns new weights
    clipped to ``[-w_max, w_max]``. Not used by the supervised pipeline.
    """
    pre = np.asarray(pre, dtype=float)
    post = np.asarray(post, dtype=float)
    x_pre = np.zeros(pre.shape[1])
    x_post = np.zeros(post.shape[1])
    dw = np.zeros_like(weights, dtype=float)
    dp, dm = np.exp(-1.0 / tau_plus), np.exp(-1.0 / tau_minus)
    for t in range(pre.shape[0]):
        x_pre = dp * x_pre + pre[t]
        x_post = dm * x_post + post[t]
        dw += np.outer(post[t], x_pre) - a_minus * np.outer(x_post, pre[t])
    return np.clip(weights + lr * dw, -w_max, w_max)
