"""Volume containers and preprocessing: resize, normalize, spatial augmentation.

Conventions used throughout the toolkit:

* volumes are ``(D, H, W)`` arrays, depth first;
* class labels are ``0=BG, 1=RV, 2=MYO, 3=LV``;
* intensity resizing is bilinear with align-corners coordinate mapping
  ``i = o * (in - 1) / (out - 1)``, label resizing is nearest-neighbor on the
  same grid (``floor(i + 0.5)``), so labels are never blended;
* positive rotation angles are counterclockwise in (H, W) index space,
  matching ``np.rot90`` for multiples of 90 degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

NUM_CLASSES = 4
CLASS_NAMES = ("BG", "RV", "MYO", "LV")
PHASES = ("ED", "ES", "synthetic")


@dataclass
class CineVolume:
    """One 3D frame of a cine sequence, shape (D, H, W), intensities in [0, 1]."""

    voxels: np.ndarray
    frame_id: str = ""
    phase: str = "synthetic"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def validate(self) -> "CineVolume":
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume must be non-empty (D, H, W), got {self.voxels.shape}")
        if self.phase not in PHASES:
            raise DataError(f"unknown phase {self.phase!r}")
        if self.voxels.size and (self.voxels.min() < 0.0 or self.voxels.max() > 1.0):
            raise DataError("voxels outside [0, 1]; call normalize() first")
        return self


@dataclass
class LabelMask:
    """Integer class labels, shape (D, H, W), values in {0, 1, 2, 3}."""

    labels: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def validate(self, paired: CineVolume | None = None) -> "LabelMask":
        if self.labels.ndim != 3:
            raise DataError(f"mask must be (D, H, W), got {self.labels.shape}")
        if paired is not None and self.labels.shape != paired.voxels.shape:
            raise DataError(
                f"mask shape {self.labels.shape} != volume shape {paired.voxels.shape}"
            )
        present = np.unique(self.labels)
        if present.size and (present.min() < 0 or present.max() >= NUM_CLASSES):
            raise DataError(f"labels outside {{0..3}}: {present.tolist()}")
        return self


@dataclass
class AugmentationSpec:
    """Spatial augmentation plan: a list of rotation angles plus axis flips.

    ``flips`` is a subset of {"horizontal", "vertical"}; "horizontal" flips the
    W axis, "vertical" flips the H axis. Angles are degrees in (-180, 180].
    """

    rotations: tuple[float, ...] = ()
    flips: tuple[str, ...] = ()
    enabled: bool = True

    def validate(self) -> "AugmentationSpec":
        for a in self.rotations:
            if not (-180.0 < a <= 180.0):
                raise ConfigError(f"rotation angle {a} outside (-180, 180]")
        for f in self.flips:
            if f not in ("horizontal", "vertical"):
                raise ConfigError(f"unknown flip {f!r}")
        if len(set(self.flips)) != len(self.flips):
            raise ConfigError("duplicate flips")
        return self


@dataclass
class PhantomSpec:
    """Parameters of the synthetic cardiac phantom generator.

    ``ring_radii`` holds per-structure radius ranges in pixels: "lv" is the
    blood-pool disk radius, "myo" the ring thickness around it, "rv" the
    radius of the adjacent blob. ``taper`` in [0, 1] shrinks structures on the
    two slices at each end of the stack (1.0 empties them entirely).
    """

    depth_range: tuple[int, int] = (8, 12)
    image_size: tuple[int, int] = (64, 64)
    ring_radii: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"lv": (6.0, 9.0), "myo": (3.0, 5.0), "rv": (4.0, 7.0)}
    )
    noise_sigma: float = 0.05
    taper: float = 0.6
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        lo, hi = self.depth_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad depth_range {self.depth_range}")
        if min(self.image_size) < 16:
            raise ConfigError(f"image_size {self.image_size} too small (min 16)")
        for key in ("lv", "myo", "rv"):
            if key not in self.ring_radii:
                raise ConfigError(f"ring_radii missing {key!r}")
            rlo, rhi = self.ring_radii[key]
            if not (0 < rlo <= rhi):
                raise ConfigError(f"bad ring_radii[{key!r}] = {self.ring_radii[key]}")
        if self.ring_radii["lv"][0] < 2.0:
            raise ConfigError("lv radius below 2 px would leave middle slices empty")
        if not (0.0 <= self.taper <= 1.0):
            raise ConfigError(f"taper {self.taper} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError(f"negative noise_sigma {self.noise_sigma}")
        return self


def normalize(v: CineVolume) -> CineVolume:
    """Min-max scale one 3D frame to [0, 1]; constant frames map to zeros."""
    vox = np.asarray(v.voxels, dtype=np.float32)
    if vox.size == 0:
        raise DataError("empty volume")
    lo = float(vox.min())
    hi = float(vox.max())
    if hi == lo:
        out = np.zeros_like(vox)
    else:
        out = (vox - lo) / np.float32(hi - lo)
    return CineVolume(out, frame_id=v.frame_id, phase=v.phase)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # align-corners mapping; an identity resize reproduces the grid exactly
    if n_out == 1:
        return np.array([0.5 * (n_in - 1)])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _resize_bilinear(planes: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    d, h, w = planes.shape
    th, tw = target
    ch = _axis_coords(h, th)
    cw = _axis_coords(w, tw)
    h0 = np.floor(ch).astype(int)
    w0 = np.floor(cw).astype(int)
    h1 = np.minimum(h0 + 1, h - 1)
    w1 = np.minimum(w0 + 1, w - 1)
    fh = (ch - h0).astype(np.float32)[:, None]
    fw = (cw - w0).astype(np.float32)[None, :]
    p00 = planes[:, h0][:, :, w0]
    p01 = planes[:, h0][:, :, w1]
    p10 = planes[:, h1][:, :, w0]
    p11 = planes[:, h1][:, :, w1]
    top = p00 * (1.0 - fw) + p01 * fw
    bot = p10 * (1.0 - fw) + p11 * fw
    return (top * (1.0 - fh) + bot * fh).astype(np.float32)


def _resize_nearest(planes: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    d, h, w = planes.shape
    th, tw = target
    ih = np.floor(_axis_coords(h, th) + 0.5).astype(int)
    iw = np.floor(_axis_coords(w, tw) + 0.5).astype(int)
    return planes[:, ih][:, :, iw]


def resize_volume(v: CineVolume | LabelMask, target: tuple[int, int]):
    """Resize every slice to ``target = (H, W)``; depth is unchanged.

    Intensity volumes are interpolated bilinearly, label masks by nearest
    neighbor so the label set can only shrink.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 8 or tw < 8:
        raise ConfigError(f"degenerate resize target {target} (min 8)")
    if isinstance(v, CineVolume):
        if (th, tw) == v.voxels.shape[1:]:
            return CineVolume(v.voxels.copy(), frame_id=v.frame_id, phase=v.phase)
        return CineVolume(
            _resize_bilinear(np.asarray(v.voxels, dtype=np.float32), (th, tw)),
            frame_id=v.frame_id,
            phase=v.phase,
        )
    if isinstance(v, LabelMask):
        if (th, tw) == v.labels.shape[1:]:
            return LabelMask(v.labels.copy())
        return LabelMask(_resize_nearest(v.labels, (th, tw)))
    raise DataError(f"cannot resize object of type {type(v).__name__}")


def is_right_angle(angle: float) -> bool:
    return float(angle) % 90.0 == 0.0


def rotate_planes(planes: np.ndarray, angle: float, order: int) -> np.ndarray:
    """Rotate each (H, W) slice counterclockwise by ``angle`` degrees.

    Multiples of 90 on square slices are exact (``np.rot90``); anything else
    goes through spline interpolation with the frame shape preserved.
    """
    h, w = planes.shape[-2:]
    k = int(float(angle) // 90.0)
    if is_right_angle(angle) and (k % 2 == 0 or h == w):
        return np.ascontiguousarray(np.rot90(planes, k=k, axes=(-2, -1)))
    return ndimage.rotate(
        planes, angle, axes=(-1, -2), reshape=False, order=order, mode="constant", cval=0.0
    )


def _flip_planes(planes: np.ndarray, direction: str) -> np.ndarray:
    axis = -1 if direction == "horizontal" else -2
    return np.ascontiguousarray(np.flip(planes, axis=axis))


def augment(
    pair: tuple[CineVolume, LabelMask], spec: AugmentationSpec, seed: int = 0
) -> list[tuple[CineVolume, LabelMask]]:
    """Expand one (volume, mask) pair into spatially transformed copies.

    The original pair is always first; each rotation and each flip adds one
    pair, with the identical transform applied to image and mask. ``seed`` is
    accepted for interface stability but the transform list is deterministic.
    """
    spec.validate()
    if not spec.enabled:
        raise ConfigError("augment called with a disabled AugmentationSpec")
    vol, mask = pair
    out = [(CineVolume(vol.voxels.copy(), vol.frame_id, vol.phase), LabelMask(mask.labels.copy()))]
    for angle in spec.rotations:
        rv = rotate_planes(np.asarray(vol.voxels, dtype=np.float32), angle, order=1)
        rm = rotate_planes(mask.labels, angle, order=0)
        out.append(
            (
                CineVolume(np.clip(rv, 0.0, 1.0), f"{vol.frame_id}+rot{angle:g}", vol.phase),
                LabelMask(rm),
            )
        )
    for direction in spec.flips:
        fv = _flip_planes(np.asarray(vol.voxels, dtype=np.float32), direction)
        fm = _flip_planes(mask.labels, direction)
        out.append(
            (CineVolume(fv, f"{vol.frame_id}+{direction[0]}flip", vol.phase), LabelMask(fm))
        )
    return out


# ---------------------------------------------------------------------------
# Synthetic cardiac phantom
# ---------------------------------------------------------------------------

# structure intensities before noise; the blood pools are bright, the
# myocardium ring sits between them and the dim background
_INTENSITY = {"BG": 0.12, "RV": 0.80, "MYO": 0.38, "LV": 0.88}


def _slice_scale(d: int, depth: int, taper: float) -> float:
    """In-plane shrink factor for slice ``d``: a smooth dome over depth plus an
    extra taper on the two slices at each end (taper=1 empties them)."""
    if depth == 1:
        return 1.0
    center = 0.5 * (depth - 1)
    rel = (d - center) / center
    dome = 1.0 - 0.3 * rel * rel
    end_index = min(d, depth - 1 - d)
    if end_index <= 1:
        return dome * (1.0 - taper)
    return dome


def _render_slice(
    shape: tuple[int, int],
    centers: tuple[tuple[float, float], tuple[float, float]],
    radii: tuple[float, float, float],
    scale: float,
) -> np.ndarray:
    """Label one slice: LV disk inside an MYO ring, RV blob to the side."""
    h, w = shape
    lv_r, myo_t, rv_r = radii
    (lv_cy, lv_cx), (rv_cy, rv_cx) = centers
    yy, xx = np.ogrid[:h, :w]
    labels = np.zeros(shape, dtype=np.uint8)
    if scale <= 0.0:
        return labels
    d2_lv = (yy - lv_cy) ** 2 + (xx - lv_cx) ** 2
    d2_rv = (yy - rv_cy) ** 2 + (xx - rv_cx) ** 2
    lv = d2_lv <= (lv_r * scale) ** 2
    myo = (d2_lv <= ((lv_r + myo_t) * scale) ** 2) & ~lv
    rv = (d2_rv <= (rv_r * scale) ** 2) & ~lv & ~myo
    labels[rv] = 1
    labels[myo] = 2
    labels[lv] = 3
    return labels


def generate_phantom(spec: PhantomSpec, count: int) -> list[tuple[CineVolume, LabelMask]]:
    """Generate ``count`` phantom volumes with ground-truth masks.

    Each volume holds concentric LV/MYO rings and an adjacent RV blob whose
    cross-sections taper toward the end slices. Deterministic for a fixed
    ``spec.seed``: volume ``k`` depends only on ``(seed, k)``.
    """
    spec.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    h, w = spec.image_size
    out = []
    for k in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, k)))
        depth = int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1))
        lv_r = rng.uniform(*spec.ring_radii["lv"])
        myo_t = rng.uniform(*spec.ring_radii["myo"])
        rv_r = rng.uniform(*spec.ring_radii["rv"])
        # keep the whole assembly inside the frame with a small jitter
        margin = lv_r + myo_t + 2 * rv_r + 2
        cy = h / 2 + rng.uniform(-0.05, 0.05) * h
        cx = w / 2 + margin / 2 - (lv_r + myo_t) + rng.uniform(-0.02, 0.02) * w
        rv_cy = cy + rng.uniform(-0.15, 0.15) * lv_r
        rv_cx = cx - (lv_r + myo_t + 0.6 * rv_r)

        labels = np.zeros((depth, h, w), dtype=np.uint8)
        for d in range(depth):
            scale = _slice_scale(d, depth, spec.taper)
            labels[d] = _render_slice(
                (h, w), ((cy, cx), (rv_cy, rv_cx)), (lv_r, myo_t, rv_r), scale
            )

        vox = np.full((depth, h, w), _INTENSITY["BG"], dtype=np.float32)
        for cls, name in ((1, "RV"), (2, "MYO"), (3, "LV")):
            vox[labels == cls] = _INTENSITY[name]
        vox += rng.normal(0.0, spec.noise_sigma, size=vox.shape).astype(np.float32)

        volume = normalize(CineVolume(vox, frame_id=f"phantom-{spec.seed}-{k:04d}"))
        out.append((volume.validate(), LabelMask(labels).validate(volume)))
    return out
