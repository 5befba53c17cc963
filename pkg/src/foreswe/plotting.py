"""Report figures, rendered off-screen to PNG files."""

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import NSE_BUCKETS  # noqa: E402

MONTH_NAMES = {12: "Dec", 1: "Jan", 2: "Feb", 3: "Mar", 4: "Apr", 5: "May", 6: "Jun"}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def nse_histogram(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        counts = [report.nse_buckets[b] for b in NSE_BUCKETS]
        ax.bar(range(len(counts)), counts, color="#4c72b0")
        ax.set_xticks(range(len(counts)), NSE_BUCKETS)
        ax.set_xlabel("NSE")
        ax.set_ylabel("locations")
        ax.set_title(f"Per-location NSE ({report.mode})")
        fig.tight_layout()
        return _save(fig, path)


def group_month_heatmap(report, path):
    groups = sorted(report.group_month_bias)
    months = list(report.group_month_bias[groups[0]]) if groups else []
    grid = np.array([[report.group_month_bias[g][m] for m in months] for g in groups], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        lim = np.nanmax(np.abs(grid)) if np.any(np.isfinite(grid)) else 1.0
        im = ax.imshow(grid, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
        ax.set_xticks(range(len(months)), [MONTH_NAMES.get(m, str(m)) for m in months])
        ax.set_yticks(range(len(groups)), [f"group {g}" for g in groups])
        for i in range(len(groups)):
            for j in range(len(months)):
                if math.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, label="median relative bias")
        fig.tight_layout()
        return _save(fig, path)


def station_forecast(days, actual, lower, mean, upper, station_id, step, path):
    """Forecast band at one horizon step against observations."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.fill_between(days, lower, upper, color="#4c72b0", alpha=0.25, lw=0, label="interval")
        ax.plot(days, mean, color="#4c72b0", lw=1.2, label="forecast")
        ax.plot(days, actual, color="k", lw=0.8, ls="--", label="observed")
        ax.set_xlabel("forecast origin (day of water year)")
        ax.set_ylabel("SWE (mm)")
        ax.set_title(f"{station_id}, step {step}")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
