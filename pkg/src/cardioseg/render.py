"""Static figure emission: per-slice segmentation overlays and grayscale
heatmaps of the per-member variance memories and weight fields.

Everything is written as ordinary PNG files via the Agg backend (no display
needed). End slices carry the labels 0, 1, -2, -1; interior slices their
index. Heatmaps are annotated with the [min, max] of the rendered map, and
each map is also exported in the portable-volume format for downstream
inspection.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import ListedColormap

from .pvol import save_volume
from .volume import CineVolume, LabelMask

# BG is drawn transparent; RV / MYO / LV get the three overlay colors
CLASS_COLORS = ("#d62728", "#2ca02c", "#1f77b4")
_OVERLAY_CMAP = ListedColormap(CLASS_COLORS)


def slice_label(index: int, depth: int) -> str:
    """Display label of a slice: end slices are 0, 1, -2, -1."""
    if index in (0, 1):
        return str(index)
    if index == depth - 1:
        return "-1"
    if index == depth - 2:
        return "-2"
    return str(index)


def _overlay(ax, image: np.ndarray, labels: np.ndarray, title: str) -> None:
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    fg = np.ma.masked_where(labels == 0, labels)
    ax.imshow(fg, cmap=_OVERLAY_CMAP, vmin=1, vmax=3, alpha=0.45, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()


def _asarray(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def render_frame(
    out_dir,
    volume: CineVolume,
    pred_mask: LabelMask,
    truth_mask: LabelMask | None = None,
    weight_field=None,
    memories=None,
    dpi: int = 100,
) -> dict:
    """Write overlays (and heatmaps, when given) for one frame.

    Returns metadata: the written files plus the [min, max] annotation of
    every heatmap, keyed per member. Without a truth mask only the prediction
    column is drawn.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vox = _asarray(volume.voxels if isinstance(volume, CineVolume) else volume)
    pred = _asarray(pred_mask.labels)
    truth = _asarray(truth_mask.labels) if truth_mask is not None else None
    depth = vox.shape[0]
    meta: dict = {"files": [], "sigma_range": {}, "omega_range": {}}

    for d in range(depth):
        ncols = 2 if truth is not None else 1
        fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 3.4))
        axes = np.atleast_1d(axes)
        label = slice_label(d, depth)
        _overlay(axes[0], vox[d], pred[d], f"slice {label} - prediction")
        if truth is not None:
            _overlay(axes[1], vox[d], truth[d], f"slice {label} - truth")
        fig.tight_layout()
        path = out_dir / f"slice_{d:02d}.png"
        fig.savefig(path, dpi=dpi)
        plt.close(fig)
        meta["files"].append(str(path))

    if memories is not None:
        for i, mem in enumerate(memories):
            meta["sigma_range"][i] = _heatmap(
                out_dir, f"sigma_m{i}", _asarray(mem.variance), volume.frame_id, dpi, meta
            )
    if weight_field is not None:
        weights = _asarray(weight_field.weights if hasattr(weight_field, "weights") else weight_field)
        for i in range(weights.shape[0]):
            meta["omega_range"][i] = _heatmap(
                out_dir, f"omega_m{i}", weights[i], volume.frame_id, dpi, meta
            )
    return meta


def _heatmap(out_dir: Path, stem: str, values: np.ndarray, frame_id: str, dpi: int, meta: dict):
    lo, hi = float(values.min()), float(values.max())
    fig, ax = plt.subplots(figsize=(3.4, 3.6))
    ax.imshow(values, cmap="gray", vmin=lo, vmax=hi if hi > lo else lo + 1e-12,
              interpolation="nearest")
    ax.set_title(f"{stem}  [{lo:.6f}, {hi:.6f}]", fontsize=9)
    ax.set_axis_off()
    fig.tight_layout()
    png = out_dir / f"{stem}.png"
    fig.savefig(png, dpi=dpi)
    plt.close(fig)
    exported = out_dir / f"{stem}.pvol"
    save_volume(
        exported,
        CineVolume(values[None].astype(np.float32), frame_id=f"{frame_id}-{stem}"),
    )
    meta["files"] += [str(png), str(exported)]
    return [lo, hi]
