"""Figure rendering for the report path.

Every plotting function writes a PNG next to the delimited output it
illustrates and returns the path, or None when the data does not support a
picture (e.g. prototypes outside 2-d/3-d). Figures are presentation only;
nothing downstream reads them back.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_prototypes(w, path, z=None, title: str = "prototypes"):
    """Prototype directions on the circle (d=2) or sphere (d=3)."""
    w = np.asarray(w, dtype=float)
    d = w.shape[1]
    wh = w / np.linalg.norm(w, axis=1, keepdims=True)
    if d == 2:
        fig, ax = plt.subplots(figsize=(4.2, 4.2))
        t = np.linspace(0, 2 * math.pi, 200)
        ax.plot(np.cos(t), np.sin(t), color="0.85", lw=1)
        if z is not None:
            zh = np.asarray(z) / np.linalg.norm(z, axis=1, keepdims=True)
            ax.scatter(zh[:, 0], zh[:, 1], s=8, c="tab:green", alpha=0.6, label="features")
        for row in wh:
            ax.annotate("", xy=row, xytext=(0, 0),
                        arrowprops=dict(arrowstyle="->", color="tab:red", lw=1.5))
        ax.set_aspect("equal")
        ax.set_title(title)
        ax.set_xlim(-1.15, 1.15)
        ax.set_ylim(-1.15, 1.15)
        return _save(fig, path)
    if d == 3:
        fig = plt.figure(figsize=(4.6, 4.6))
        ax = fig.add_subplot(projection="3d")
        u, v = np.meshgrid(np.linspace(0, 2 * math.pi, 24), np.linspace(0, math.pi, 12))
        ax.plot_wireframe(np.cos(u) * np.sin(v), np.sin(u) * np.sin(v), np.cos(v),
                          color="0.88", lw=0.4)
        if z is not None:
            zh = np.asarray(z) / np.linalg.norm(z, axis=1, keepdims=True)
            ax.scatter(zh[:, 0], zh[:, 1], zh[:, 2], s=8, c="tab:green", alpha=0.7)
        for row in wh:
            ax.quiver(0, 0, 0, *row, color="tab:red", lw=1.5, arrow_length_ratio=0.12)
        ax.set_title(title)
        ax.set_box_aspect((1, 1, 1))
        return _save(fig, path)
    return None


def plot_history(history, path, title: str = "optimization history"):
    """Loss and margin trajectories from a RunHistory."""
    rows = history.rows
    if not rows:
        return None
    steps = [r.step for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2))
    axes[0].plot(steps, [r.loss for r in rows], lw=1.2)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[1].plot(steps, [math.degrees(r.class_margin) for r in rows],
                 lw=1.2, label="class margin (deg)")
    if rows[0].gamma_min is not None:
        ax2 = axes[1].twinx()
        ax2.plot(steps, [r.gamma_min for r in rows], lw=1.0, color="tab:orange",
                 label="gamma_min")
        ax2.set_ylabel("gamma_min")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("class margin (deg)")
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_evals(record, path, title: str = "training"):
    """Accuracy and margin over epochs from a RunRecord."""
    snaps = record.snapshots
    if not snaps:
        return None
    epochs = [s.epoch for s in snaps]
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2))
    axes[0].plot(epochs, [s.test_accuracy for s in snaps], marker="o", ms=3)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("test accuracy")
    axes[0].set_ylim(0, 1.02)
    axes[1].plot(epochs, [s.report.class_margin_deg for s in snaps],
                 marker="o", ms=3, color="tab:blue")
    axes[1].set_ylabel("class margin (deg)", color="tab:blue")
    ax2 = axes[1].twinx()
    ax2.plot(epochs, [s.report.m_samp for s in snaps],
             marker="s", ms=3, color="tab:orange")
    ax2.set_ylabel("m_samp", color="tab:orange")
    axes[1].set_xlabel("epoch")
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_histogram(rows, path, xlabel: str, title: str):
    """Bar chart from (bin_left, bin_right, count) rows."""
    if not rows:
        return None
    lefts = [float(r[0]) for r in rows]
    rights = [float(r[1]) for r in rows]
    counts = [int(r[2]) for r in rows]
    widths = [r - l for l, r in zip(lefts, rights)]
    fig, ax = plt.subplots(figsize=(4.6, 3.0))
    ax.bar(lefts, counts, width=widths, align="edge", color="tab:blue", alpha=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
