"""Matplotlib rendering of diagnostic figures as deterministic SVG files.

Every figure goes through ``save_svg`` which pins the SVG hash salt and
strips the creation date, making output files byte-identical across runs
for the same inputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import LineCollection

_RC = {
    "svg.hashsalt": "dcvit",
    "figure.figsize": (6.4, 4.8),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.25,
}

BLUE = "#1f77b4"
RED = "#d62728"


def save_svg(fig, path: str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_error_scatter(labels_px: np.ndarray, preds_px: np.ndarray,
                         within: np.ndarray, threshold_mm: float,
                         path: str) -> None:
    """Scatter of true positions, split at the error threshold.

    Blue markers are at/under the threshold, red above; faint segments
    join each prediction to its true position.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        segments = np.stack([preds_px, labels_px], axis=1)
        ax.add_collection(LineCollection(
            segments, colors="0.55", linewidths=0.5, alpha=0.35, zorder=1))
        for mask, color, tag in ((within, BLUE, "within"),
                                 (~within, RED, "above")):
            if mask.any():
                ax.scatter(labels_px[mask, 0], labels_px[mask, 1], s=14,
                           c=color, label=f"{tag} {threshold_mm:g} mm",
                           zorder=2)
        ax.set_xlabel("x (px)")
        ax.set_ylabel("y (px)")
        ax.set_title("Test error by gaze position")
        ax.invert_yaxis()  # screen coordinates grow downward
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(loc="upper right", fontsize=8)
        save_svg(fig, path)


def render_heatmap(normalized: np.ndarray, path: str) -> None:
    """Channel-by-time raster of a normalized EEG window."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        im = ax.imshow(normalized, aspect="auto", cmap="viridis",
                       vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_xlabel("time step")
        ax.set_ylabel("channel")
        ax.set_title("EEG window (per-sample min-max normalized)")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label="normalized amplitude")
        save_svg(fig, path)


def render_confusion_matrix(cm: np.ndarray, path: str) -> None:
    """Counts raster: rows are true classes, columns predictions."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        im = ax.imshow(cm, cmap="viridis", interpolation="nearest")
        ax.set_xlabel("predicted class")
        ax.set_ylabel("true class")
        ax.set_title("Confusion matrix")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label="count")
        save_svg(fig, path)
