"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SGCK"                       magic
    uint32                        format version
    uint64                        header length in bytes
    header                        UTF-8 JSON
    float32[...]                  every tensor, in header order
    float32[...]                  ADAM first then second moment, for each
                                  tensor flagged ``moments`` in header order

The header records names, shapes, the config fingerprints, the epoch, the
serialized RNG state and the per-tensor ADAM step counters.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptDatasetError, IncompatibleCheckpointError

MAGIC = b"SGCK"
VERSION = 1


class CorruptCheckpointError(CorruptDatasetError):
    pass


@dataclass
class ModelCheckpoint:
    stage: int
    epoch: int
    tensors: dict
    moments: dict = field(default_factory=dict)  # name -> (m, v, t)
    rng_state: dict = None
    fingerprint: str = ""
    stage1_fingerprint: str = ""
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def prefixed(self, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def has(self, prefix):
        return any(k.startswith(prefix) for k in self.tensors)

    def equals(self, other):
        """Bit-level equality of every tensor, moment, counter and RNG state."""
        if (self.stage, self.epoch, self.fingerprint, self.rng_state) != (
                other.stage, other.epoch, other.fingerprint, other.rng_state):
            return False
        if list(self.tensors) != list(other.tensors) or list(self.moments) != list(other.moments):
            return False
        for k, v in self.tensors.items():
            if v.shape != other.tensors[k].shape or v.tobytes() != other.tensors[k].tobytes():
                return False
        for k, (m, v, t) in self.moments.items():
            m2, v2, t2 = other.moments[k]
            if t != t2 or m.tobytes() != m2.tobytes() or v.tobytes() != v2.tobytes():
                return False
        return True


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4")


def to_bytes(ckpt):
    entries = []
    for name, arr in ckpt.tensors.items():
        mom = ckpt.moments.get(name)
        entries.append({"name": name, "shape": list(arr.shape), "moments": mom is not None,
                        "t": int(mom[2]) if mom is not None else 0})
    header = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "dtype": "float32",
        "fingerprint": ckpt.fingerprint,
        "stage1_fingerprint": ckpt.stage1_fingerprint,
        "arch": ckpt.arch,
        "train": ckpt.train,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(hbytes)), hbytes]
    parts.extend(_f32(a).tobytes() for a in ckpt.tensors.values())
    for e in entries:
        if e["moments"]:
            m, v, _ = ckpt.moments[e["name"]]
            parts.append(_f32(m).tobytes())
            parts.append(_f32(v).tobytes())
    return b"".join(parts)


def from_bytes(blob):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise IncompatibleCheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from exc
    pos = 16 + hlen

    def take(shape):
        nonlocal pos
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise CorruptCheckpointError("checkpoint truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
        return arr

    tensors = {e["name"]: take(e["shape"]) for e in header["tensors"]}
    moments = {}
    for e in header["tensors"]:
        if e["moments"]:
            m = take(e["shape"])
            v = take(e["shape"])
            moments[e["name"]] = (m, v, e["t"])
    if pos != len(blob):
        raise CorruptCheckpointError("trailing bytes after checkpoint payload")
    return ModelCheckpoint(
        stage=header["stage"], epoch=header["epoch"], tensors=tensors, moments=moments,
        rng_state=header["rng_state"], fingerprint=header["fingerprint"],
        stage1_fingerprint=header["stage1_fingerprint"], arch=header["arch"],
        train=header["train"], meta=header.get("meta", {}),
    )


def save_checkpoint(ckpt, path):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
