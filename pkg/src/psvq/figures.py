"""SVG figure rendering for maps, confidence ellipses, and tracking strips."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib
matplotlib.use("Agg")
# deterministic SVG output: stable element ids, no embedded timestamps
matplotlib.rcParams["svg.hashsalt"] = "psvq"
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Ellipse

_SVG_KW = {"format": "svg", "bbox_inches": "tight",
           "metadata": {"Date": None}}

from .gridref import GridPosterior, freeform_region
from .posterior import GaussianPosterior, confidence_region
from .tracking import TrackingSeries


def save_heatmap(path, values: np.ndarray, title: str = "",
                 units: str = "", cmap: str = "viridis",
                 vmin: Optional[float] = None,
                 vmax: Optional[float] = None) -> None:
    """One parameter/uncertainty map; NaNs (background) render blank."""
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(values, cmap=cmap, vmin=vmin, vmax=vmax,
                   interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    cbar = fig.colorbar(im, ax=ax, fraction=0.046)
    if units:
        cbar.set_label(units)
    fig.savefig(path, **_SVG_KW)
    plt.close(fig)


def _add_ellipse(ax, post: GaussianPosterior, color: str, label=None,
                 level: float = 0.95):
    cr = confidence_region(post, level=level)
    ax.add_patch(Ellipse(cr.center, 2 * cr.semi_axes[0], 2 * cr.semi_axes[1],
                         angle=np.degrees(cr.orientation), fill=False,
                         edgecolor=color, lw=1.2, label=label))
    ax.plot(*cr.center, "+", color=color, ms=6)


def save_ellipse_overlay(path, posteriors: Sequence[tuple],
                         grid_post: Optional[GridPosterior] = None,
                         truth: Optional[np.ndarray] = None,
                         title: str = "") -> None:
    """95% confidence ellipses in the (f, k) plane.

    `posteriors` is a list of (label, GaussianPosterior, color).  When a
    grid posterior is given, its free-form 95% region is drawn as a filled
    contour underneath the ellipses.
    """
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    if grid_post is not None:
        region = freeform_region(grid_post)
        f_axis, k_axis = grid_post.spec.axes()
        ax.contourf(f_axis, k_axis, region.T.astype(float), levels=[0.5, 1.5],
                    colors=["#cccccc"], alpha=0.6)
    for label, post, color in posteriors:
        _add_ellipse(ax, post, color, label=label)
    if truth is not None:
        ax.plot(truth[0], truth[1], "k*", ms=10, label="truth")
    ax.set_xlabel("volume fraction f")
    ax.set_ylabel("exchange rate k (1/s)")
    ax.set_title(title)
    ax.legend(fontsize=8, loc="best")
    ax.autoscale_view()
    fig.savefig(path, **_SVG_KW)
    plt.close(fig)


def save_tracking_strip(path, series: TrackingSeries, voxel_row: int,
                        bounds=None, title: str = "") -> None:
    """Row of CR ellipses across prefix lengths for one tracked voxel."""
    from .posterior import from_covariance
    p = series.prefixes.size
    ncol = min(p, 8)
    pick = np.unique(np.linspace(0, p - 1, ncol).round().astype(int))
    fig, axes = plt.subplots(1, pick.size,
                             figsize=(1.9 * pick.size, 2.2), sharex=True,
                             sharey=True)
    axes = np.atleast_1d(axes)
    for ax, pi in zip(axes, pick):
        if bounds is None:
            from .posterior import ParameterBounds
            lo = series.mu[voxel_row, :, :].min(axis=0)
            hi = series.mu[voxel_row, :, :].max(axis=0)
            span = np.maximum(hi - lo, 1e-6)
            bounds_i = ParameterBounds(f=(lo[0] - span[0], hi[0] + span[0]),
                                       k=(lo[1] - span[1], hi[1] + span[1]))
        else:
            bounds_i = bounds
        post = from_covariance(series.mu[voxel_row, pi],
                               series.cov[voxel_row, pi], bounds_i)
        _add_ellipse(ax, post, "tab:blue")
        ax.plot(series.map_f[voxel_row, -1], series.map_k[voxel_row, -1],
                "k*", ms=7)
        ax.set_title(f"n={series.prefixes[pi]}", fontsize=8)
        ax.tick_params(labelsize=6)
        ax.autoscale_view()
    fig.suptitle(title)
    fig.savefig(path, **_SVG_KW)
    plt.close(fig)


def save_training_curves(path, report, title: str = "") -> None:
    """Loss components over epochs from a training report."""
    fig, ax1 = plt.subplots(figsize=(4.8, 3.2))
    ax1.plot(report.epoch, report.l_c, color="tab:blue", label="L_c")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("data term", color="tab:blue")
    ax1.set_yscale("log")
    ax2 = ax1.twinx()
    ax2.plot(report.epoch, report.logdet, color="tab:orange",
             label="log det")
    ax2.set_ylabel("posterior log det", color="tab:orange")
    ax1.set_title(title)
    fig.savefig(path, **_SVG_KW)
    plt.close(fig)


def save_scatter(path, x, y, xlabel: str, ylabel: str, title: str = "",
                 diagonal: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(3.8, 3.4))
    ax.plot(np.asarray(x), np.asarray(y), ".", ms=2.5, alpha=0.5)
    if diagonal:
        lim = max(np.max(x), np.max(y))
        ax.plot([0, lim], [0, lim], "k--", lw=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.savefig(path, **_SVG_KW)
    plt.close(fig)
