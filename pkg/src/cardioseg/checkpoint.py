"""Byte-deterministic checkpoint container.

Layout: 4-byte magic ``CKPT``, u8 format version, little-endian u64 header
length, a compact sorted-key JSON header, then the raw bytes of every array
concatenated in the header's order (arrays sorted by name, C order,
little-endian). Identical contents always serialize to identical bytes —
unlike zip-based containers, which embed timestamps — so checkpoints can be
compared with a plain hash.

A training checkpoint stores, per member: parameters, the two RMSprop
accumulators of each parameter, and the dropout generator state; plus the
epoch counter, the loss history, and the member specs needed to rebuild the
networks. Resuming replays the exact uninterrupted run.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .models import ClassifierSpec, init_classifier
from .training import OptAccumulator, TrainState, flat_named_params

MAGIC = b"CKPT"
VERSION = 1
_PREFIX = struct.Struct("<4sBQ")


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write named arrays plus a JSON-serializable metadata dict."""
    path = Path(path)
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode()
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + header_len])
    except ValueError as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    offset = _PREFIX.size + header_len
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        end = offset + nbytes
        if end > len(raw):
            raise DataError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype=dtype).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header["meta"]


def save_train_state(path, state: TrainState) -> Path:
    """Checkpoint a full training state (members, optimizer, counters)."""
    arrays: dict[str, np.ndarray] = {}
    named = flat_named_params(state.members)
    if len(named) != len(state.accumulators):
        raise DataError("accumulators do not match parameters; refusing to checkpoint")
    for (name, p), acc in zip(named, state.accumulators):
        arrays[name] = p.detach().numpy()
        arrays[name + ".sq"] = acc.sq.numpy()
        arrays[name + ".buf"] = acc.buf.numpy()
    for i, m in enumerate(state.members):
        arrays[f"m{i}.dropout_rng_state"] = m.dropout_rng.get_state().numpy()
    meta = {
        "kind": "train-state",
        "epoch": state.epoch,
        "loss_history": state.loss_history,
        "members": [m.spec.to_dict() for m in state.members],
    }
    return write_arrays(path, arrays, meta)


def load_train_state(path) -> TrainState:
    """Rebuild a training state; resuming continues the exact run."""
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "train-state":
        raise DataError(f"{path}: not a training checkpoint")
    members = [init_classifier(ClassifierSpec.from_dict(d)) for d in meta["members"]]
    accumulators = []
    for name, p in flat_named_params(members):
        for key in (name, name + ".sq", name + ".buf"):
            if key not in arrays:
                raise DataError(f"{path}: missing array {key!r}")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise DataError(f"{path}: shape mismatch for {key!r}")
        p.data = torch.from_numpy(arrays[name].copy())
        accumulators.append(
            OptAccumulator(
                sq=torch.from_numpy(arrays[name + ".sq"].copy()),
                buf=torch.from_numpy(arrays[name + ".buf"].copy()),
            )
        )
    for i, m in enumerate(members):
        key = f"m{i}.dropout_rng_state"
        if key in arrays:
            m.dropout_rng.set_state(torch.from_numpy(arrays[key].copy()))
    return TrainState(
        members=members,
        accumulators=accumulators,
        epoch=int(meta["epoch"]),
        loss_history=[float(x) for x in meta["loss_history"]],
    )
