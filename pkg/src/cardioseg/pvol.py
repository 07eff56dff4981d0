"""Portable-volume file format and on-disk dataset layout.

A ``.pvol`` file is a little-endian header followed by the payload:

====== ===== =========================================
offset bytes content
====== ===== =========================================
0      4     magic ``b"PVOL"``
4      4    u32 format version (currently 1)
8      12    u32 D, u32 H, u32 W
20     1     u8 has_mask flag
21     ...   D*H*W float32 voxels, row-major
...    ...   D*H*W uint8 labels when has_mask == 1
====== ===== =========================================

``raw-f32`` is the headerless alternative: bare float32 voxels whose shape
must be supplied by the caller. A dataset directory is a set of ``.pvol``
files plus an ``index.json`` listing them; both are byte-deterministic for a
fixed seed so reruns can be compared with ``cmp``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError, VolumeShapeError
from .volume import CineVolume, LabelMask

MAGIC = b"PVOL"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")

FORMATS = ("portable-volume", "raw-f32")


def save_volume(path, vol: CineVolume, mask: LabelMask | None = None) -> None:
    """Write one volume (and optional mask) as a portable-volume file."""
    d, h, w = vol.voxels.shape
    if mask is not None and mask.labels.shape != (d, h, w):
        raise VolumeShapeError(f"mask shape {mask.labels.shape} != volume shape {(d, h, w)}")
    payload = [_HEADER.pack(MAGIC, VERSION, d, h, w, 0 if mask is None else 1)]
    payload.append(np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())
    if mask is not None:
        payload.append(np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(payload))


def load_volume(
    path,
    format: str = "portable-volume",
    shape: tuple[int, int, int] | None = None,
) -> tuple[CineVolume, LabelMask | None]:
    """Read a volume from disk.

    ``portable-volume`` parses the shape from the header; ``raw-f32`` needs an
    explicit ``shape``. The frame id is taken from the file name.
    """
    path = Path(path)
    if format not in FORMATS:
        raise VolumeFormatError(f"unknown format {format!r}, expected one of {FORMATS}")
    blob = path.read_bytes()
    frame_id = path.stem

    if format == "raw-f32":
        if shape is None:
            raise VolumeFormatError("raw-f32 requires an explicit (D, H, W) shape")
        d, h, w = shape
        expected = d * h * w * 4
        if len(blob) != expected:
            raise VolumeShapeError(
                f"{path.name}: raw-f32 payload is {len(blob)} bytes, expected {expected}"
            )
        vox = np.frombuffer(blob, dtype="<f4").reshape(d, h, w).copy()
        return CineVolume(vox, frame_id=frame_id), None

    if len(blob) < _HEADER.size:
        raise VolumeFormatError(f"{path.name}: file shorter than the header")
    magic, version, d, h, w, has_mask = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path.name}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path.name}: unsupported version {version}")
    if has_mask not in (0, 1):
        raise VolumeFormatError(f"{path.name}: bad has_mask byte {has_mask}")
    n = d * h * w
    expected = _HEADER.size + 4 * n + (n if has_mask else 0)
    if len(blob) != expected:
        raise VolumeShapeError(
            f"{path.name}: {len(blob)} bytes on disk, header implies {expected}"
        )
    vox = np.frombuffer(blob, dtype="<f4", count=n, offset=_HEADER.size)
    vol = CineVolume(vox.reshape(d, h, w).copy(), frame_id=frame_id)
    mask = None
    if has_mask:
        lab = np.frombuffer(blob, dtype=np.uint8, count=n, offset=_HEADER.size + 4 * n)
        mask = LabelMask(lab.reshape(d, h, w).copy())
    return vol, mask


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

INDEX_NAME = "index.json"


def save_dataset(
    out_dir, pairs: list[tuple[CineVolume, LabelMask | None]], meta: dict | None = None
) -> Path:
    """Write volumes as ``.pvol`` files plus a deterministic ``index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (vol, mask) in enumerate(pairs):
        name = f"{vol.frame_id or f'frame-{i:04d}'}.pvol"
        save_volume(out_dir / name, vol, mask)
        d, h, w = vol.voxels.shape
        entries.append(
            {
                "file": name,
                "frame_id": vol.frame_id,
                "phase": vol.phase,
                "depth": d,
                "height": h,
                "width": w,
                "has_mask": mask is not None,
            }
        )
    index = {"entries": entries, "meta": meta or {}}
    index_path = out_dir / INDEX_NAME
    index_path.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
    return index_path


def load_dataset(data_dir) -> list[tuple[CineVolume, LabelMask | None]]:
    """Load every entry of a dataset directory, in index order."""
    data_dir = Path(data_dir)
    index_path = data_dir / INDEX_NAME
    if not index_path.exists():
        raise VolumeFormatError(f"no {INDEX_NAME} in {data_dir}")
    index = json.loads(index_path.read_text())
    pairs = []
    for entry in index["entries"]:
        vol, mask = load_volume(data_dir / entry["file"])
        vol.frame_id = entry.get("frame_id", vol.frame_id)
        vol.phase = entry.get("phase", vol.phase)
        if entry.get("has_mask") and mask is None:
            raise VolumeShapeError(f"{entry['file']}: index promises a mask but file has none")
        pairs.append((vol, mask))
    return pairs
