"""Matplotlib figures for benchmark and weighting reports.

Figures are written straight to files with the Agg backend; SVG output is
made reproducible by pinning the hash salt and dropping the date stamp.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "grid.color": "0.85",
    "grid.linewidth": 0.5,
    "savefig.bbox": "tight",
    "svg.hashsalt": "kdereg",
    "svg.fonttype": "none",
}

SERIES = {
    "weighted": ("with KDE", "C0", "o"),
    "unweighted": ("without KDE", "C1", "s"),
    "icp": ("ICP", "C2", "^"),
}


def figure_size(width_pt: float = 252.0, ratio: float | None = None):
    """Figure size in inches for a given column width in points."""
    if ratio is None:
        ratio = (np.sqrt(5.0) - 1.0) / 2.0
    width = width_pt / 72.27
    return width, width * ratio


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def plot_sweep(report, path) -> None:
    """RMSE against view angle, one line with error bars per method."""
    rows = sorted(report.summary(), key=lambda r: r["angle"])
    angles = [r["angle"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        for method, (label, color, marker) in SERIES.items():
            mean = np.array([r[f"{method}_mean"] for r in rows]) * 1e3
            std = np.array([r[f"{method}_std"] for r in rows]) * 1e3
            ax.errorbar(angles, mean, yerr=std, label=label, color=color, marker=marker,
                        markersize=3.5, linewidth=1.0, capsize=2.0)
        ax.set_xlabel("view angle (deg)")
        ax.set_ylabel("RMSE (mm)")
        ax.set_xticks(angles)
        ax.grid(True, axis="y")
        ax.legend()
        _save(fig, path)


def plot_scaling(report, path) -> None:
    """Log-log stage timings against the number of correspondences."""
    m = np.array([r["m"] for r in report.rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        for stage, label in (("init_ms", "neighbour init"),
                             ("weighting_ms", "density weighting"),
                             ("solve_ms", "rigid solve")):
            t = np.array([r[stage] for r in report.rows])
            ax.loglog(m, t, marker="o", markersize=3.5, linewidth=1.0,
                      label=f"{label} (slope {report.slope(stage):.2f})")
        ax.set_xlabel("correspondences m")
        ax.set_ylabel("median time (ms)")
        ax.grid(True, which="both")
        ax.legend()
        _save(fig, path)


def plot_densities(weights, points, path) -> None:
    """Per-axis density estimates with the weighted samples marked underneath."""
    pts = np.asarray(points).reshape(-1, 3)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=figure_size(504.0, 0.3))
        for axis, (ax, name) in enumerate(zip(axes, "xyz")):
            est = weights.densities[axis]
            if est is not None:
                ax.plot(est.grid, est.values, color=f"C{axis}", linewidth=1.0)
                ax.set_title(f"{name}  (H = {est.bandwidth * 1e3:.1f} mm)")
            else:
                ax.set_title(f"{name}  (no spread)")
            ax.scatter(pts[:, axis], np.zeros(len(pts)), s=2 + 18 * np.asarray(weights.values),
                       color="k", alpha=0.5, linewidths=0)
            ax.set_xlabel(f"{name} (m)")
        axes[0].set_ylabel("density")
        _save(fig, path)
