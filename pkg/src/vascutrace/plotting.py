"""Report figures: error violins, centerline overlays and annotated frames.

Everything renders off-screen with the Agg backend and writes straight to
files; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TRUTH_COLOR = "#1f5fbf"
RECON_COLOR = "#d62728"
FILTERED_COLOR = "#2ca02c"

# fixed metadata keeps PNG bytes stable between identical runs
_PNG_META = {"Software": None}

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def error_violins(groups: Sequence[tuple[str, np.ndarray, np.ndarray]], path, title: str | None = None) -> Path:
    """Side-by-side violins of per-point errors, unfiltered vs filtered.

    ``groups`` holds ``(label, unfiltered_errors, filtered_errors)``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 1.6 * len(groups) + 1.5), 3.2))
        ticks, labels = [], []
        for k, (label, unf, filt) in enumerate(groups):
            x = 3.0 * k
            for dx, data, color in ((0.0, unf, RECON_COLOR), (1.0, filt, FILTERED_COLOR)):
                data = np.asarray(data, dtype=float)
                if len(data) < 2:
                    ax.plot([x + dx], data, "o", color=color)
                    continue
                parts = ax.violinplot([data], positions=[x + dx], widths=0.8, showmeans=True, showextrema=True)
                for body in parts["bodies"]:
                    body.set_facecolor(color)
                    body.set_edgecolor("black")
                    body.set_alpha(0.6)
                for key in ("cmeans", "cmins", "cmaxes", "cbars"):
                    parts[key].set_color("black")
                    parts[key].set_linewidth(0.8)
            ticks.append(x + 0.5)
            labels.append(label)
        ax.set_xticks(ticks, labels)
        ax.set_ylabel("nearest-truth error (mm)")
        ax.set_yscale("symlog", linthresh=1.0)
        ax.set_ylim(bottom=0.0)
        handles = [
            plt.Rectangle((0, 0), 1, 1, color=RECON_COLOR, alpha=0.6),
            plt.Rectangle((0, 0), 1, 1, color=FILTERED_COLOR, alpha=0.6),
        ]
        ax.legend(handles, ["unfiltered", "filtered"], loc="upper right", frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def centerline_overlay(truth: np.ndarray, unfiltered: np.ndarray, filtered: np.ndarray, path, title: str | None = None) -> Path:
    """3-D view of reconstructed centroids (red) over the ground-truth centerline (blue)."""
    truth = np.asarray(truth).reshape(-1, 3)
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(8.0, 3.8))
        for k, (pts, name) in enumerate(((unfiltered, "unfiltered"), (filtered, "filtered"))):
            pts = np.asarray(pts).reshape(-1, 3)
            ax = fig.add_subplot(1, 2, k + 1, projection="3d")
            ax.scatter(*truth.T, s=2, color=TRUTH_COLOR, label="ground truth")
            if len(pts):
                ax.scatter(*pts.T, s=4, color=RECON_COLOR, label="reconstructed")
            ax.set_title(f"{name} ({len(pts)} points)")
            ax.set_xlabel("x (mm)")
            ax.set_ylabel("y (mm)")
            ax.set_zlabel("z (mm)")
            lo, hi = truth.min(axis=0), truth.max(axis=0)
            mid, half = (lo + hi) / 2.0, max(np.max(hi - lo) / 2.0, 1.0)
            ax.set_xlim(mid[0] - half, mid[0] + half)
            ax.set_ylim(mid[1] - half, mid[1] + half)
            ax.set_zlim(mid[2] - half, mid[2] + half)
            ax.view_init(elev=25, azim=-60)
            if k == 0:
                ax.legend(loc="upper left", frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def frame_with_detections(pixels: np.ndarray, centroids_native: np.ndarray, path, filter_px: float | None = 85.0, title=None) -> Path:
    """A B-mode frame with detected centroids and the lateral filter band."""
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0 * h / w))
        ax.imshow(pixels, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
        if filter_px is not None:
            for x in (w / 2.0 - filter_px, w / 2.0 + filter_px):
                ax.axvline(x, color="yellow", lw=0.8, ls="--")
        c = np.asarray(centroids_native, dtype=float).reshape(-1, 2)
        if len(c):
            ax.plot(c[:, 0], c[:, 1], "+", color=RECON_COLOR, ms=8, mew=1.5)
        ax.set_xlim(-0.5, w - 0.5)
        ax.set_ylim(h - 0.5, -0.5)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)
