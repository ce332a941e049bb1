"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_traces(bundle, path) -> Path:
    """Voltage magnitude, current magnitude, P/Q and Active intervals per converter."""
    t = bundle.t
    ok = np.isfinite(t)
    fig, axes = plt.subplots(4, 1, figsize=(8, 9), sharex=True)
    tr = bundle.traces
    for k, name in enumerate(bundle.conv_names):
        c = f"C{k}"
        axes[0].plot(t[ok], tr["v_mag"][ok, k], color=c, label=name)
        axes[1].plot(t[ok], tr["i_mag"][ok, k], color=c, label=name)
        axes[2].plot(t[ok], tr["p"][ok, k], color=c, label=f"P {name}")
        axes[2].plot(t[ok], tr["q"][ok, k], "--", color=c, label=f"Q {name}")
        axes[3].step(t[ok], tr["active"][ok, k] + 1.2 * k, where="post", color=c, label=name)
    i_max = [c["i_max"] for c in bundle.config["topology"]["converters"] if "i_max" in c]
    if i_max:
        axes[1].axhline(max(i_max), color="k", lw=0.8, ls=":")
    axes[0].set_ylabel("|v| (pu)")
    axes[1].set_ylabel("|i| (pu)")
    axes[2].set_ylabel("P, Q (pu)")
    axes[3].set_ylabel("Active")
    axes[3].set_xlabel("t (s)")
    for ax in axes:
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, loc="upper right")
    fig.suptitle(f"{bundle.scenario} / {bundle.controller}")
    return _save(fig, path)


def plot_loss(losses, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(np.arange(1, len(losses) + 1), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked MSE (pu$^2$)")
    ax.grid(alpha=0.3, which="both")
    return _save(fig, path)


def plot_energy(rows, path) -> Path:
    names = [r["architecture"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, [r["P_on"] or 0.0 for r in rows], 0.4, label="Active")
    ax.bar(x + 0.2, [r["P_off"] for r in rows], 0.4, label="Idle")
    ax.set_xticks(x, names)
    ax.set_ylabel("power (mW)")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)
