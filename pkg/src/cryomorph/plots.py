"""Static SVG figures: loss curves, latent scatter, FSC curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed element ids and no timestamp so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "cryomorph"
_META = {"Date": None}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_history(history: list, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in history]
    for key in ("recon_self", "recon_aug", "recon_cross", "embed", "total"):
        ax.plot(epochs, [r[key] for r in history], label=key, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch-mean loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_latents(coords: np.ndarray, labels: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=labels, s=6, cmap="tab10",
                    vmin=0, vmax=max(9, int(labels.max(initial=0))))
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(*sc.legend_elements(), title="class", fontsize=8)
    _save(fig, path)


def plot_fsc(curves: dict, path) -> None:
    """``curves`` maps a label to ``(frequencies, values)``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (f, v) in curves.items():
        ax.plot(np.asarray(f) / 0.5, v, label=name)
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("normalized frequency")
    ax.set_ylabel("FSC")
    ax.set_ylim(-0.2, 1.05)
    if curves:
        ax.legend(fontsize=8)
    _save(fig, path)
