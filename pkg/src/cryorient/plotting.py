"""Matplotlib figures for stage outputs; everything renders off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history, path) -> None:
    """Training and validation loss per epoch."""
    epochs = [r[0] for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, [r[1] for r in history], label="train")
    ax.plot(epochs, [r[2] for r in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("L_DE")
    ax.set_yscale("log")
    ax.legend()
    _save(fig, path)


def plot_recovery_trace(trace: dict, path, check_every: int = 100) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    sampled = np.asarray(trace["sampled_loss"])
    if len(sampled):
        ax.plot(np.arange(1, len(sampled) + 1), sampled, lw=0.5, alpha=0.5, label="mini-batch")
    ckpt = np.asarray(trace["checkpoint_loss"])
    if len(ckpt):
        ax.plot(check_every * np.arange(1, len(ckpt) + 1), ckpt, "o-", ms=2, label="full graph")
    ax.set_xlabel("step")
    ax.set_ylabel("L_OR")
    ax.set_yscale("log")
    ax.legend()
    _save(fig, path)


def plot_error_histogram(hist: dict, path) -> None:
    edges = np.asarray(hist["edges"])
    counts = np.asarray(hist["counts"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge")
    ax.set_xlabel("per-orientation error (rad)")
    ax.set_ylabel("count")
    _save(fig, path)


def plot_fsc(freq, values, path, threshold: float = 0.5, label: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(freq, values, "o-", ms=3, label=label)
    ax.axhline(threshold, color="gray", ls="--", lw=1)
    ax.set_xlabel("spatial frequency (1 / length)")
    ax.set_ylabel("FSC")
    ax.set_ylim(-0.1, 1.05)
    if label:
        ax.legend()
    _save(fig, path)


def plot_distance_scatter(d_true, d_est, path, max_points: int = 5000) -> None:
    """Estimated against true orientation distance."""
    d_true = np.asarray(d_true)
    d_est = np.asarray(d_est)
    if len(d_true) > max_points:
        keep = np.random.default_rng(0).choice(len(d_true), max_points, replace=False)
        d_true, d_est = d_true[keep], d_est[keep]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(d_true, d_est, s=2, alpha=0.3)
    ax.plot([0, np.pi], [0, np.pi], color="gray", lw=1)
    ax.set_xlabel("true distance (rad)")
    ax.set_ylabel("estimated distance")
    _save(fig, path)


def plot_sweep(levels, values, path, xlabel: str, ylabel: str, per_seed=None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if per_seed is not None:
        for x, ys in zip(levels, per_seed):
            ax.scatter([x] * len(ys), ys, color="gray", s=8)
    ax.plot(levels, values, "o-")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    _save(fig, path)
