"""Report figures written as PNG files next to the CSV tables they summarize."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .beamsim import CHANNEL_ZE, N_CHANNELS  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100, metadata=_META)
    plt.close(fig)


def plot_history(rows: Sequence[Mapping], path, title: str = "") -> None:
    """Train / test loss against epoch."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ep = [r["epoch"] for r in rows]
    ax.plot(ep, [r["train_loss"] for r in rows], label="train")
    ax.plot(ep, [r["test_loss"] for r in rows], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("L1 loss")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_error_hist(errors: Mapping[str, np.ndarray], path, bins: int = 30) -> None:
    """Overlaid histograms of per-sample mean L1 error, one per checkpoint label."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    allv = np.concatenate([np.asarray(v) for v in errors.values()]) if errors else np.zeros(1)
    edges = np.linspace(0.0, max(float(allv.max()), 1e-6), bins + 1)
    for label, v in errors.items():
        ax.hist(v, bins=edges, histtype="step", label=label)
    ax.set_xlabel("mean L1 error per sample")
    ax.set_ylabel("count")
    ax.legend()
    _save(fig, path)


def plot_tune(t, costs, windowed, latents, path, threshold: float | None = None, target=None) -> None:
    """Cost trace (raw and windowed) and the latent trajectory in its first two coordinates."""
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(9, 3.5))
    a0.semilogy(np.arange(len(costs)), np.maximum(costs, 1e-6), lw=0.5, alpha=0.5, label="cost")
    a0.semilogy(np.arange(len(windowed)), np.maximum(windowed, 1e-6), label="windowed")
    if threshold is not None:
        a0.axhline(threshold, color="k", ls="--", lw=0.8)
    a0.set_xlabel("step")
    a0.legend()
    z = np.asarray(latents)
    if z.shape[1] >= 2:
        a1.plot(z[:, 0], z[:, 1], lw=0.5)
        a1.plot(z[0, 0], z[0, 1], "go", label="start")
        if target is not None:
            a1.plot(target[0], target[1], "r*", ms=10, label="target")
        a1.set_xlabel("z1")
        a1.set_ylabel("z2")
    else:
        a1.plot(z[:, 0], lw=0.5)
        if target is not None:
            a1.axhline(target[0], color="r", ls="--")
        a1.set_xlabel("step")
        a1.set_ylabel("z1")
    a1.legend()
    _save(fig, path)


def plot_lps(stack: np.ndarray, stations: Sequence[int], names: Sequence[str], path, other: np.ndarray | None = None) -> None:
    """(z, E) projection at every station; a second stack adds a comparison row."""
    rows = 1 if other is None else 2
    n = len(stations)
    fig, axes = plt.subplots(rows, n, figsize=(2.2 * n, 2.2 * rows), squeeze=False)
    for r, st in enumerate([stack] if other is None else [stack, other]):
        for k in range(n):
            ax = axes[r, k]
            ax.imshow(st[k * N_CHANNELS + CHANNEL_ZE].T, origin="lower", cmap="viridis")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(names[k], fontsize=8)
    _save(fig, path)
