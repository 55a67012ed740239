"""Versioned binary checkpoint container.

Layout (all little-endian): magic ``SSCK``, uint32 format version, uint32
config length + UTF-8 JSON config echo, uint32 parameter count, then per
parameter: uint16 name length + name, uint8 ndim, uint32 dims, float32
row-major data. Parameters are stored float32 and loaded back as float64.
"""

import json
import struct

import numpy as np

from .errors import ContractError

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config, params):
    """Write config (JSON-serializable dict) and named float arrays."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.ndim > 2:
            raise ContractError("save_checkpoint: %r has ndim > 2" % name)
        if not np.all(np.isfinite(arr)):
            raise ContractError("save_checkpoint: %r has non-finite values" % name)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Read back (config dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ContractError("checkpoint %s: truncated while reading %s" % (path, what))
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != CHECKPOINT_MAGIC:
        raise ContractError("checkpoint %s: bad magic %r" % (path, magic))
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise ContractError("checkpoint %s: unsupported version %d" % (path, version))
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = json.loads(bytes(take(cfg_len, "config")).decode("utf-8"))
    except ValueError as exc:
        raise ContractError("checkpoint %s: bad config block (%s)" % (path, exc)) from None
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * size, "data for %r" % name), dtype="<f4")
        params[name] = data.reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise ContractError("checkpoint %s: %d trailing bytes" % (path, len(blob) - pos))
    return config, params
