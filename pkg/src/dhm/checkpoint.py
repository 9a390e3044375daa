"""Binary weight checkpoints.

Layout (little-endian): magic "DHMW", u16 format version, u32 config-block
length followed by that many bytes of "key=value" lines, u32 parameter
count, then per parameter: u16 name length, name bytes, u8 rank, u32
extents, u8 dtype code {0: f32, 1: f64}, raw values.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DHMW"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}


class CheckpointError(Exception):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _encode_config(config):
    if not config:
        return b""
    lines = []
    for k, v in config.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"config key/value not encodable: {k!r}")
        lines.append(f"{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_config(blob):
    config = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        config[key] = val
    return config


def save_checkpoint(path, named_params, config=None):
    """Write (name, array) pairs plus a flat config block."""
    blob = _encode_config(config or {})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(named_params)))
        for name, arr in named_params:
            arr = np.asarray(arr)
            if arr.dtype == np.float64:
                code = 1
            elif arr.dtype == np.float32:
                code = 0
            else:
                raise CheckpointError(f"parameter {name!r} has unsupported "
                                      f"dtype {arr.dtype}")
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise CheckpointError(f"parameter name too long: {name!r}")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(struct.pack("<B", code))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ({name: array}, config dict)."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what}",
                                  off)
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic", 0)
    version = struct.unpack("<H", take(2, "version"))[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}", 4)
    cfg_len = struct.unpack("<I", take(4, "config length"))[0]
    config = _decode_config(take(cfg_len, "config block"))
    count = struct.unpack("<I", take(4, "parameter count"))[0]
    params = {}
    for _ in range(count):
        nlen = struct.unpack("<H", take(2, "name length"))[0]
        name = take(nlen, "name").decode("utf-8")
        rank = take(1, "rank")[0]
        shape = tuple(struct.unpack("<I", take(4, "extent"))[0]
                      for _ in range(rank))
        code = take(1, "dtype code")[0]
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}",
                                  off - 1)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        itemsize = 4 if code == 0 else 8
        raw = take(n * itemsize, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape)
        params[name] = arr.astype(np.float32 if code == 0 else np.float64)
    return params, config
