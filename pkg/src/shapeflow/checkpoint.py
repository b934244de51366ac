"""Versioned binary checkpoint container.

Layout: magic ``SFCK``, a little-endian u32 format version, a u64 length
followed by a canonical JSON header (config hash, iteration, stage,
optimizer step, rng record, and the ordered block directory with
shapes), then each block's raw data as little-endian float64 in C order.
Blocks are written in sorted name order, and the header is serialized
with sorted keys and fixed separators, so saving a loaded checkpoint
reproduces the original file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

MAGIC = b"SFCK"
VERSION = 1

_PARAM = "param"
_ADAM_M = "adam.m"
_ADAM_V = "adam.v"


class CheckpointError(ValueError):
    """Unreadable, corrupt, or mismatched checkpoint."""


@dataclass
class Checkpoint:
    config_hash: str
    iteration: int
    stage: str
    params: Dict[str, np.ndarray]
    opt_m: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    rng: dict = field(default_factory=dict)


def _blocks_of(ck: Checkpoint):
    """(kind-prefixed name, array) pairs in canonical file order."""
    groups = ((_PARAM, ck.params), (_ADAM_M, ck.opt_m), (_ADAM_V, ck.opt_v))
    for prefix, group in groups:
        for name in sorted(group):
            yield f"{prefix}/{name}", np.asarray(group[name], dtype=np.float64)


def save_checkpoint(ck: Checkpoint, path) -> None:
    directory = [[name, list(arr.shape)] for name, arr in _blocks_of(ck)]
    header = {
        "config_hash": ck.config_hash,
        "iteration": int(ck.iteration),
        "stage": ck.stage,
        "opt_step": int(ck.opt_step),
        "rng": ck.rng,
        "blocks": directory,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for _, arr in _blocks_of(ck):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(
            f"checkpoint was written under config {header['config_hash'][:12]}…, "
            f"refusing to load under {expected_hash[:12]}…"
        )
    ck = Checkpoint(
        config_hash=header["config_hash"],
        iteration=header["iteration"],
        stage=header["stage"],
        params={},
        opt_step=header["opt_step"],
        rng=header["rng"],
    )
    groups = {_PARAM: ck.params, _ADAM_M: ck.opt_m, _ADAM_V: ck.opt_v}
    offset = 16 + hlen
    for name, shape in header["blocks"]:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"checkpoint truncated inside block {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += nbytes
        prefix, _, base = name.partition("/")
        if prefix not in groups:
            raise CheckpointError(f"unknown block kind {prefix!r}")
        groups[prefix][base] = arr.astype(np.float64)
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the last block")
    return ck
