"""Figures for firing statistics, spike maps, training curves and the D sweep."""

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

plt.rcParams.update(
    {
        "font.family": "serif",
        "font.serif": ["Times New Roman", "DejaVu Serif", "serif"],
        "font.size": 10,
        "axes.labelsize": 11,
        "axes.titlesize": 12,
        "axes.titleweight": "bold",
        "axes.linewidth": 0.8,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "legend.fontsize": 9,
        "legend.framealpha": 0.95,
        "legend.edgecolor": "#CCCCCC",
        "xtick.labelsize": 9,
        "ytick.labelsize": 9,
        "figure.dpi": 150,
        "savefig.dpi": 300,
        "savefig.facecolor": "white",
    }
)

COLORS = {
    "sfa": "#2563EB",
    "vanilla": "#4A4A4A",
    "loss": "#DC2626",
    "test": "#1B4D3E",
    "rank": "#7C3AED",
    "energy": "#D35400",
    "window": "#CCCCCC",
}


def _save(fig, path):
    fig.savefig(path, dpi=300, bbox_inches="tight", facecolor="white", edgecolor="none")
    plt.close(fig)


def _twin_legend(ax1, ax2, loc):
    h1, l1 = ax1.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax1.legend(h1 + h2, l1 + l2, loc=loc)


def plot_nsfr(series: dict[str, np.ndarray], path, d_cap: int | None = None):
    """NSFR per micro-step for one or more runs, e.g. {'sfa': ..., 'vanilla': ...}."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, values in series.items():
        steps = np.arange(1, len(values) + 1)
        ax.plot(steps, values, marker="o", ms=3, lw=1.4, label=label,
                color=COLORS.get(label, None))
    if d_cap:
        longest = max(len(v) for v in series.values())
        for b in range(d_cap, longest, d_cap):
            ax.axvline(b + 0.5, color=COLORS["window"], lw=0.8, ls="--")
    ax.set_xlabel("Micro-step")
    ax.set_ylabel("NSFR")
    ax.set_ylim(bottom=0)
    ax.legend()
    _save(fig, path)


def plot_spike_maps(maps: np.ndarray, path, title: str = ""):
    """Per-step firing-rate maps (steps, H, W) plus their mean in the last panel."""
    steps = maps.shape[0]
    panels = [*maps, maps.mean(axis=0)] if steps > 1 else [maps[0]]
    fig, axes = plt.subplots(1, len(panels), figsize=(1.8 * len(panels), 2.2), squeeze=False)
    for i, (ax, img) in enumerate(zip(axes[0], panels)):
        im = ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title("mean" if i == steps else f"step {i + 1}", fontsize=9, fontweight="normal")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=10)
    _save(fig, path)


def plot_training(history: pd.DataFrame, path):
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(history["epoch"], history["loss"], color=COLORS["loss"], lw=1.4, label="loss")
    ax1.set_xlabel("Epoch")
    ax1.set_ylabel("Cross-entropy")
    ax2 = ax1.twinx()
    ax2.plot(history["epoch"], history["train_accuracy"], color=COLORS["sfa"], lw=1.2, label="train")
    if history["test_accuracy"].notna().any():
        ax2.plot(history["epoch"], history["test_accuracy"], color=COLORS["test"], lw=1.2, ls="--", label="test")
    ax2.set_ylabel("Accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.spines["right"].set_visible(True)
    _twin_legend(ax1, ax2, "center right")
    _save(fig, path)


def plot_pretraining(history: pd.DataFrame, path):
    """Reconstruction loss per step and effective rank where it was measured."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(history["step"], history["loss"], color=COLORS["loss"], lw=1.0)
    ax1.set_xlabel("Step")
    ax1.set_ylabel("Masked MSE")
    ranked = history.dropna(subset=["effective_rank"])
    ax2.plot(ranked["step"], ranked["effective_rank"], color=COLORS["rank"], marker="o", ms=3, lw=1.2)
    ax2.set_xlabel("Step")
    ax2.set_ylabel("Effective rank")
    _save(fig, path)


def plot_d_sweep(table: pd.DataFrame, path):
    fig, ax1 = plt.subplots(figsize=(5.5, 3.5))
    ax1.errorbar(table["d_cap"], table["accuracy_mean"], yerr=table["accuracy_std"].fillna(0),
                 color=COLORS["sfa"], marker="o", capsize=3, lw=1.4, label="accuracy")
    ax1.set_xlabel("D")
    ax1.set_ylabel("Accuracy")
    ax1.set_xticks(table["d_cap"])
    ax2 = ax1.twinx()
    ax2.plot(table["d_cap"], table["energy_ratio"], color=COLORS["energy"], marker="s", lw=1.2,
             label="energy / smallest D")
    ax2.set_ylabel("Energy ratio")
    ax2.spines["right"].set_visible(True)
    _twin_legend(ax1, ax2, "upper left")
    _save(fig, path)
