"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0-3    magic  b"EMCK"
    bytes 4-7    u32    format version (1)
    bytes 8-15   u64    header length H
    bytes 16..   H bytes of UTF-8 JSON header
    then         float64 payload, tensors back to back in header order

Header keys: ``format``, ``version``, ``seed``, ``best_epoch``, ``config``
(``TrainConfig.to_dict()``), ``feature_stats`` (``mean``/``std`` lists) and
``tensors``: a list of ``{"name", "shape", "offset", "count"}`` where
``offset`` is in float64 elements from the start of the payload.  The JSON is
written with sorted keys and no timestamps, so identical inputs give
identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import FeatureStats

MAGIC = b"EMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    seed: int
    stats: FeatureStats
    best_epoch: int = 0


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors, offset = [], 0
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype=np.float64)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
    header = {
        "format": "emotrack-checkpoint",
        "version": VERSION,
        "seed": int(ckpt.seed),
        "best_epoch": int(ckpt.best_epoch),
        "config": ckpt.config.to_dict(),
        "feature_stats": {"mean": [float(v) for v in ckpt.stats.mean],
                          "std": [float(v) for v in ckpt.stats.std]},
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(ckpt.params[t["name"]], dtype="<f8").tobytes() for t in tensors)
    Path(path).write_bytes(MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw + payload)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an emotrack checkpoint")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    payload = np.frombuffer(blob[16 + hlen:], dtype="<f8")
    params = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["count"]]
        if chunk.size != t["count"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        params[t["name"]] = chunk.astype(np.float64).reshape(t["shape"])
    stats = FeatureStats(np.array(header["feature_stats"]["mean"]), np.array(header["feature_stats"]["std"]))
    return Checkpoint(params, TrainConfig.from_dict(header["config"]), header["seed"], stats,
                      header.get("best_epoch", 0))
