"""Single-file network checkpoints.

Layout: the magic ``SEPNET1\\n``, a little-endian uint32 header length, a UTF-8
JSON header ``{spec, seed, epoch, tensors: [[name, shape], ...]}``, then each
tensor as little-endian float32 in header order.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import ValidationError
from .network import NetworkParams, NetworkSpec

MAGIC = b"SEPNET1\n"


def save_checkpoint(path, params: NetworkParams, epoch: int, extra: dict | None = None) -> None:
    header = {
        "spec": params.spec.to_dict(),
        "seed": params.spec.seed,
        "epoch": int(epoch),
        "tensors": [[name, list(w.shape)] for name, w in params.weights.items()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for w in params.weights.values():
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValidationError(f"{path}: not a network checkpoint")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + n].decode("utf-8"))
    offset = start + n
    weights = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        weights[name] = arr.astype(dtype)
        offset += 4 * count
    if offset != len(data):
        raise ValidationError(f"{path}: {len(data) - offset} trailing bytes")
    return NetworkParams(NetworkSpec.from_dict(header["spec"]), weights), header
