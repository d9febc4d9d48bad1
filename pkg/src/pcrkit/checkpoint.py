"""Checkpoint serialization.

Layout: magic "PCRL", u32 version, u64 manifest length, manifest JSON,
then a blob of little-endian float32 values in manifest order. The
manifest records config, seed, and per-parameter name/shape/offset.
Arithmetic stays float64 in memory; storage is float32.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .encoder import EncoderConfig
from .errors import PcrError
from .util import json_dumps

MAGIC = b"PCRL"
VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], cfg: EncoderConfig,
                    seed: int | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        a32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(a32.tobytes())
        offset += a32.nbytes
    manifest = {
        "format_version": VERSION,
        "seed": seed,
        "config": cfg.to_dict(),
        "params": entries,
    }
    mbytes = json_dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (params float64, EncoderConfig, seed)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise PcrError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise PcrError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        blob = f.read()
    cfg = EncoderConfig.from_dict(manifest["config"])
    params: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return params, cfg, manifest.get("seed")
