"""Evaluation metrics on hard segmentations: per-class Dice overlap, the
end-slice coefficient, and Hausdorff distance, plus CSV reporting.

Conventions pinned here:

* both-empty Dice is 1.0 (perfect agreement on absence), one-empty is 0.0;
* Hausdorff with exactly one empty set is undefined (``None``) and excluded
  from aggregates, which instead count the undefined entries; both-empty is 0;
* Hausdorff distances are in pixels, with the depth axis scaled by a
  configurable slice spacing (default 1);
* hard masks come from probabilities by per-pixel argmax with ties broken
  toward the lowest class index;
* the end coefficient compares the end-slice average Dice (RV/MYO/LV) of each
  frame against a strict ``>`` threshold and averages the indicator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, VolumeShapeError
from .volume import LabelMask

FOREGROUND_CLASSES = (1, 2, 3)  # RV, MYO, LV
_CLASS_KEY = {1: "rv", 2: "myo", 3: "lv"}


@dataclass
class EvalConfig:
    ec_threshold: float = 0.8
    end_slice_count: int = 2
    slice_spacing: float = 1.0
    dsc_classes: tuple[int, ...] = FOREGROUND_CLASSES

    def validate(self) -> "EvalConfig":
        if not (0.0 < self.ec_threshold < 1.0):
            raise ConfigError(f"ec_threshold must be in (0, 1), got {self.ec_threshold}")
        if self.end_slice_count < 1:
            raise ConfigError("end_slice_count must be >= 1")
        if self.slice_spacing <= 0:
            raise ConfigError("slice_spacing must be > 0")
        return self


@dataclass
class MetricRecord:
    frame_id: str
    dsc: dict[int, float] = field(default_factory=dict)  # class -> DSC
    average_dsc: float = 0.0
    hd: dict[int, float | None] = field(default_factory=dict)  # class -> HD or None
    end_slice_avg_dsc: float = 0.0
    ec_pass: bool = False


def argmax_mask(probs) -> LabelMask:
    """Hard labels from (D, 4, H, W) probabilities; ties go to the lowest class."""
    arr = probs.probs if hasattr(probs, "probs") else probs
    if hasattr(arr, "detach"):
        arr = arr.detach().cpu().numpy()
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise VolumeShapeError(f"expected (D, 4, H, W), got {arr.shape}")
    return LabelMask(np.argmax(arr, axis=1).astype(np.uint8))


def _check_same_shape(pred_mask: LabelMask, truth: LabelMask) -> None:
    if pred_mask.labels.shape != truth.labels.shape:
        raise VolumeShapeError(
            f"mask shapes differ: {pred_mask.labels.shape} vs {truth.labels.shape}"
        )


def hard_dsc(pred_mask: LabelMask, truth: LabelMask, cls: int) -> float:
    """Dice overlap ``2|A n B| / (|A| + |B|)`` of one class; both-empty -> 1."""
    _check_same_shape(pred_mask, truth)
    a = pred_mask.labels == cls
    b = truth.labels == cls
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def average_dsc(pred_mask: LabelMask, truth: LabelMask, classes=FOREGROUND_CLASSES) -> float:
    """Arithmetic mean of per-class Dice over the foreground classes."""
    return sum(hard_dsc(pred_mask, truth, c) for c in classes) / len(classes)


def end_slice_indices(depth: int, per_side: int) -> list[int]:
    """First and last ``per_side`` slice indices, deduplicated for short stacks."""
    idx = sorted(set(range(min(per_side, depth))) | {depth - 1 - i for i in range(per_side) if depth - 1 - i >= 0})
    return idx


def end_slice_avg_dsc(pred_mask: LabelMask, truth: LabelMask, cfg: EvalConfig) -> float:
    """Average Dice restricted to the end slices of the frame."""
    _check_same_shape(pred_mask, truth)
    idx = end_slice_indices(pred_mask.labels.shape[0], cfg.end_slice_count)
    sub_pred = LabelMask(pred_mask.labels[idx])
    sub_truth = LabelMask(truth.labels[idx])
    return average_dsc(sub_pred, sub_truth, cfg.dsc_classes)


def end_coefficient(frames: list[tuple[LabelMask, LabelMask]], cfg: EvalConfig | None = None) -> float:
    """Fraction of frames whose end-slice average Dice exceeds the threshold."""
    cfg = (cfg or EvalConfig()).validate()
    if not frames:
        raise DataError("end_coefficient needs at least one frame")
    hits = sum(
        1 for pred, truth in frames if end_slice_avg_dsc(pred, truth, cfg) > cfg.ec_threshold
    )
    return hits / len(frames)


def hausdorff(
    pred_mask: LabelMask, truth: LabelMask, cls: int, slice_spacing: float = 1.0
) -> float | None:
    """Symmetric Hausdorff distance between class-``cls`` voxel sets.

    Euclidean distance in pixels; the depth coordinate is multiplied by
    ``slice_spacing``. Returns 0.0 when both sets are empty and ``None`` when
    exactly one is (undefined, excluded from aggregates).
    """
    _check_same_shape(pred_mask, truth)
    a = np.argwhere(pred_mask.labels == cls).astype(np.float64)
    b = np.argwhere(truth.labels == cls).astype(np.float64)
    if a.size == 0 and b.size == 0:
        return 0.0
    if a.size == 0 or b.size == 0:
        return None
    a[:, 0] *= slice_spacing
    b[:, 0] *= slice_spacing
    dz = a[:, 0, None] - b[None, :, 0]
    dy = a[:, 1, None] - b[None, :, 1]
    dx = a[:, 2, None] - b[None, :, 2]
    d2 = dz * dz + dy * dy + dx * dx
    directed_ab = d2.min(axis=1).max()
    directed_ba = d2.min(axis=0).max()
    return float(np.sqrt(max(directed_ab, directed_ba)))


def evaluate_frame(pred_mask: LabelMask, truth: LabelMask, cfg: EvalConfig, frame_id: str = "") -> MetricRecord:
    """All metrics of one frame."""
    rec = MetricRecord(frame_id=frame_id)
    for c in cfg.dsc_classes:
        rec.dsc[c] = hard_dsc(pred_mask, truth, c)
        rec.hd[c] = hausdorff(pred_mask, truth, c, cfg.slice_spacing)
    rec.average_dsc = sum(rec.dsc.values()) / len(rec.dsc)
    rec.end_slice_avg_dsc = end_slice_avg_dsc(pred_mask, truth, cfg)
    rec.ec_pass = rec.end_slice_avg_dsc > cfg.ec_threshold
    return rec


def evaluate_testset(
    frames: list[tuple[LabelMask, LabelMask]],
    cfg: EvalConfig | None = None,
    frame_ids: list[str] | None = None,
) -> tuple[list[MetricRecord], dict]:
    """Per-frame records plus the aggregate row.

    The aggregate averages Dice columns over frames, averages each Hausdorff
    column over the frames where it is defined (counting the undefined ones),
    and reports the end coefficient as the mean of the per-frame indicators.
    """
    cfg = (cfg or EvalConfig()).validate()
    if not frames:
        raise DataError("evaluate_testset needs at least one frame")
    ids = frame_ids or [f"frame-{i:04d}" for i in range(len(frames))]
    if len(ids) != len(frames):
        raise DataError("frame_ids length mismatch")
    records = [
        evaluate_frame(pred, truth, cfg, frame_id=fid)
        for (pred, truth), fid in zip(frames, ids)
    ]
    k = len(records)
    agg: dict = {"frame_id": "aggregate", "n_frames": k}
    for c in cfg.dsc_classes:
        agg[f"dsc_{_CLASS_KEY[c]}"] = sum(r.dsc[c] for r in records) / k
        defined = [r.hd[c] for r in records if r.hd[c] is not None]
        agg[f"hd_{_CLASS_KEY[c]}"] = sum(defined) / len(defined) if defined else None
        agg[f"hd_{_CLASS_KEY[c]}_undefined"] = k - len(defined)
    agg["average_dsc"] = sum(r.average_dsc for r in records) / k
    agg["end_slice_avg_dsc"] = sum(r.end_slice_avg_dsc for r in records) / k
    agg["ec"] = sum(1 for r in records if r.ec_pass) / k
    return records, agg


# ---------------------------------------------------------------------------
# CSV report
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "frame_id",
    "dsc_rv",
    "dsc_myo",
    "dsc_lv",
    "average_dsc",
    "hd_rv",
    "hd_myo",
    "hd_lv",
    "hd_rv_undefined",
    "hd_myo_undefined",
    "hd_lv_undefined",
    "end_slice_avg_dsc",
    "ec_pass",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def write_metrics_csv(records: list[MetricRecord], aggregate: dict, path) -> Path:
    """Write the fixed-schema metric report: one row per frame, aggregate last.

    Floats carry six decimals; undefined Hausdorff cells are empty. Per-frame
    ``hd_*_undefined`` is a 0/1 indicator and the aggregate row holds the
    count; the aggregate's ``ec_pass`` column is the end coefficient itself.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.frame_id,
                    _fmt(r.dsc[1]),
                    _fmt(r.dsc[2]),
                    _fmt(r.dsc[3]),
                    _fmt(r.average_dsc),
                    _fmt(r.hd[1]),
                    _fmt(r.hd[2]),
                    _fmt(r.hd[3]),
                    _fmt(int(r.hd[1] is None)),
                    _fmt(int(r.hd[2] is None)),
                    _fmt(int(r.hd[3] is None)),
                    _fmt(r.end_slice_avg_dsc),
                    _fmt(r.ec_pass),
                ]
            )
        writer.writerow(
            [
                aggregate["frame_id"],
                _fmt(aggregate["dsc_rv"]),
                _fmt(aggregate["dsc_myo"]),
                _fmt(aggregate["dsc_lv"]),
                _fmt(aggregate["average_dsc"]),
                _fmt(aggregate["hd_rv"]),
                _fmt(aggregate["hd_myo"]),
                _fmt(aggregate["hd_lv"]),
                _fmt(aggregate["hd_rv_undefined"]),
                _fmt(aggregate["hd_myo_undefined"]),
                _fmt(aggregate["hd_lv_undefined"]),
                _fmt(aggregate["end_slice_avg_dsc"]),
                _fmt(aggregate["ec"]),
            ]
        )
    return path


def read_metrics_csv(path) -> list[dict]:
    """Read a metric report back as a list of row dicts (strings preserved)."""
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
