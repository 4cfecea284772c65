"""Matplotlib figures written next to the CSV outputs (SVG by default)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .toy_data import GaussianMixture  # noqa: E402

# stable element ids and no timestamp, so reruns give identical SVG files
plt.rcParams.update({
    "svg.hashsalt": "jsdlab",
    "font.size": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "figure.dpi": 100,
})
METADATA = {"Date": None, "Creator": None}

METHOD_COLORS = {"sds": "tab:orange", "jsd": "tab:blue"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=METADATA)
    plt.close(fig)
    return path


def plot_sweep(rows, path):
    rows = np.array(rows, dtype=np.float64)
    a = rows[:, 0]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k, name in enumerate(["KLD", "JD", "JSD", "GJSD", "approx. JSD (-E_q ln D*)"], start=1):
        y = rows[:, k]
        y = np.where(np.isfinite(y), y, np.nan)
        ax.plot(a, y, label=name, lw=1.4)
    ax.axhline(np.log(2), color="0.5", lw=0.8, ls=":")
    ax.set_xlabel("a   (p = (a, 1-a), q = (1-a, a))")
    ax.set_ylabel("divergence (nats)")
    ax.set_ylim(0, 4)
    ax.legend(frameon=False)
    return _save(fig, path)


def _centers(ax, mixture):
    c = mixture.centers
    ax.scatter(c[:, 0], c[:, 1], marker="x", s=30, c="k", lw=1, zorder=5)


def plot_samples(generated, truth, path, mixture=None):
    mixture = mixture or GaussianMixture()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(truth[:, 0], truth[:, 1], s=2, c="0.7", label="data")
    ax.scatter(generated[:, 0], generated[:, 1], s=2, c="tab:red", label="generated")
    _centers(ax, mixture)
    ax.set_aspect("equal")
    ax.legend(frameon=False, markerscale=4, loc="upper right")
    return _save(fig, path)


def plot_loss(losses, path):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean noise MSE")
    ax.set_yscale("log")
    return _save(fig, path)


def plot_noise_scatter(records, path, title=None):
    """Estimated noise against control variate, both components pooled."""
    fig, ax = plt.subplots(figsize=(4, 4))
    for rec in records:
        ax.scatter(rec.eps_main.ravel(), rec.control_variate.ravel(), s=6, alpha=0.6,
                   c=METHOD_COLORS.get(rec.method))
    vals = np.concatenate([np.abs(r.eps_main).ravel() for r in records]
                          + [np.abs(r.control_variate).ravel() for r in records])
    lim = max(1.0, float(vals.max()))
    ax.plot([-lim, lim], [-lim, lim], color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("estimated noise")
    ax.set_ylabel("control variate")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_trajectories(records, path, mixture=None, title=None, truth=None):
    mixture = mixture or GaussianMixture()
    fig, ax = plt.subplots(figsize=(4, 4))
    if truth is not None:
        ax.scatter(truth[:, 0], truth[:, 1], s=1, c="0.85")
    _centers(ax, mixture)
    for rec in records:
        p = rec.path
        ax.plot(p[:, 0], p[:, 1], lw=0.6, alpha=0.5, c=METHOD_COLORS.get(rec.method, "k"))
    if records:
        start = records[0].path[0]
        ends = np.array([r.terminal for r in records])
        ax.scatter(ends[:, 0], ends[:, 1], s=8, c="red", zorder=6)
        ax.scatter([start[0]], [start[1]], s=40, c="teal", zorder=7)
    ax.set_xlim(-1.6, 1.6)
    ax.set_ylim(-1.6, 1.6)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    return _save(fig, path)
