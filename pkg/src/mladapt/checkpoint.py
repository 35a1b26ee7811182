"""Binary checkpoint format: magic "CKPT", version, length-prefixed table
of (dotted name, shape, float64 little-endian values) entries."""

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CKPT"
VERSION = 1

_META_PREFIX = "__meta__."


class CheckpointFormatError(ValueError):
    """Checkpoint file is malformed or has the wrong magic/version."""


@dataclass
class Checkpoint:
    """Named parameter snapshot with selection metadata."""

    params: dict
    val_loss: float = float("nan")
    step: int = 0
    extra: dict = field(default_factory=dict)


def _write_entry(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, ckpt):
    entries = [(name, np.asarray(arr, dtype=np.float64))
               for name, arr in ckpt.params.items()]
    entries.append((_META_PREFIX + "val_loss", np.float64(ckpt.val_loss)))
    entries.append((_META_PREFIX + "step", np.float64(ckpt.step)))
    for key, value in sorted(ckpt.extra.items()):
        entries.append((_META_PREFIX + key, np.float64(value)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(
                f"bad magic {magic!r}, expected {MAGIC!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        params = {}
        meta = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(
                _read_exact(fh, 8 * size, f"values of {name}"), dtype="<f8"
            ).astype(np.float64).reshape(shape)
            if name.startswith(_META_PREFIX):
                meta[name[len(_META_PREFIX):]] = float(data.reshape(()))
            else:
                params[name] = data
    ckpt = Checkpoint(
        params=params,
        val_loss=meta.pop("val_loss", float("nan")),
        step=int(meta.pop("step", 0)),
        extra=meta,
    )
    return ckpt


def snapshot_params(named_params):
    """Deep-copy a {name: Tensor} mapping into plain arrays."""
    return {name: t.data.copy() for name, t in named_params.items()}


def restore_params(named_params, ckpt, prefix=None, strict=True):
    """Load checkpoint arrays into matching tensors in place.

    With a `prefix`, only names under it are considered. Missing or
    shape-mismatched names raise unless `strict` is false.
    """
    loaded = 0
    for name, t in named_params.items():
        if prefix is not None and not name.startswith(prefix):
            continue
        if name not in ckpt.params:
            if strict:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            continue
        arr = ckpt.params[name]
        if arr.shape != t.data.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                f"model {t.data.shape}"
            )
        t.data = arr.copy()
        loaded += 1
    return loaded
