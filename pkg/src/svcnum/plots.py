"""Convergence figures drawn from a trace CSV."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_trace(path):
    """Load a trace CSV into ``(header, float array)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    return header, data


def _columns(header, prefix):
    return [(i, h[len(prefix):]) for i, h in enumerate(header) if h.startswith(prefix)]


def plot_rates(trace_csv, out_path, title=None):
    """Per-session rate (Kbps) against dual update count."""
    header, data = read_trace(trace_csv)
    it = np.arange(1, len(data) + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, name in _columns(header, "x_"):
        ax.plot(it, data[:, i], lw=1.2, label=name)
    ax.set_xlabel("dual update")
    ax.set_ylabel("rate (Kbps)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2, frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_duals(trace_csv, out_path, title=None):
    """Per-link price against dual update count on a log axis.

    Prices that underflow to zero are left out rather than drawn at the floor.
    """
    header, data = read_trace(trace_csv)
    it = np.arange(1, len(data) + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    drawn = False
    for i, name in _columns(header, "mu_"):
        y = np.where(data[:, i] > 0, data[:, i], np.nan)
        if np.any(np.isfinite(y)):
            ax.plot(it, y, lw=1.2, label=name)
            drawn = True
    if drawn:
        ax.set_yscale("log")
        ax.legend(fontsize=7, ncol=2, frameon=False)
    ax.set_xlabel("dual update")
    ax.set_ylabel("link price")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
