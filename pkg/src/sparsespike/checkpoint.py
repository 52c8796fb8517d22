"""Single-file checkpoint format shared by every pipeline stage.

Layout: magic "SSNC", u32 version, u64 header length, canonical JSON header,
then raw blobs in header order. Float blobs are little-endian float32 in row
major order, shape-prefixed through the header; mask blobs are bit-packed.
Canonical header encoding (sorted keys, fixed separators, sorted blob names)
makes a save -> load -> save round trip byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import AnnModel, NetworkSpec
from .pruning import SparsityMask
from .snn import SnnModel
from .tensor import Array, Tensor

MAGIC = b"SSNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, Array]
    buffers: dict[str, Array] = field(default_factory=dict)
    thresholds: dict[str, float] = field(default_factory=dict)
    mask: SparsityMask | None = None
    metadata: dict = field(default_factory=dict)

    # ------------------------------------------------------------------
    @staticmethod
    def from_ann(model: AnnModel, metadata: dict | None = None,
                 mask: SparsityMask | None = None) -> "Checkpoint":
        return Checkpoint(
            spec=model.spec,
            params={k: v.data.copy() for k, v in model.params.items()},
            buffers={k: v.copy() for k, v in model.buffers.items()},
            mask=mask,
            metadata=dict(metadata or {}),
        )

    @staticmethod
    def from_snn(model: SnnModel, metadata: dict | None = None) -> "Checkpoint":
        return Checkpoint(
            spec=model.spec,
            params={k: v.data.copy() for k, v in model.params.items()},
            buffers={k: v.copy() for k, v in model.buffers.items()},
            thresholds={k: float(v.data) for k, v in model.thresholds.items()},
            mask=model.mask,
            metadata=dict(metadata or {}),
        )

    def ann_model(self) -> AnnModel:
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return AnnModel(self.spec, params, {k: v.copy() for k, v in self.buffers.items()})

    def snn_model(self, tau: float | None = None) -> SnnModel:
        if not self.thresholds:
            raise CheckpointError("checkpoint carries no thresholds; convert it first")
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        thresholds = {
            k: Tensor(np.float32(v), requires_grad=True) for k, v in self.thresholds.items()
        }
        if tau is None:
            tau = float(self.metadata.get("tau", 1.0))
        return SnnModel(
            self.spec,
            params,
            {k: v.copy() for k, v in self.buffers.items()},
            thresholds,
            tau=tau,
            mask=self.mask,
        )


def save(ckpt: Checkpoint, path) -> str:
    blobs = []  # (kind, name, shape, payload_bytes)
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        blobs.append(("param", name, arr.shape, arr.tobytes()))
    for name in sorted(ckpt.buffers):
        arr = np.ascontiguousarray(ckpt.buffers[name], dtype="<f4")
        blobs.append(("buffer", name, arr.shape, arr.tobytes()))
    for name in sorted(ckpt.thresholds):
        arr = np.asarray(ckpt.thresholds[name], dtype="<f4").reshape(())
        blobs.append(("threshold", name, arr.shape, arr.tobytes()))
    if ckpt.mask is not None:
        for name in sorted(ckpt.mask.masks):
            m = ckpt.mask.masks[name]
            packed = np.packbits(m.astype(np.uint8).reshape(-1))
            blobs.append(("mask", name, m.shape, packed.tobytes()))
    header = {
        "network": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
        "mask": None
        if ckpt.mask is None
        else {"kappa": ckpt.mask.kappa, "granularity": ckpt.mask.granularity},
        "blobs": [
            {"kind": kind, "name": name, "shape": list(shape), "bytes": len(payload)}
            for kind, name, shape, payload in blobs
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, _, _, payload in blobs:
            f.write(payload)
    return sha256(path)


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode())
    spec = NetworkSpec.from_dict(header["network"])
    offset = 16 + header_len
    params: dict[str, Array] = {}
    buffers: dict[str, Array] = {}
    thresholds: dict[str, float] = {}
    mask_arrays: dict[str, Array] = {}
    for entry in header["blobs"]:
        payload = raw[offset : offset + entry["bytes"]]
        if len(payload) != entry["bytes"]:
            raise CheckpointError(f"truncated blob {entry['name']}")
        offset += entry["bytes"]
        shape = tuple(entry["shape"])
        if entry["kind"] == "mask":
            n = int(np.prod(shape)) if shape else 1
            bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=n)
            mask_arrays[entry["name"]] = bits.astype(np.float32).reshape(shape)
            continue
        arr = np.frombuffer(payload, dtype="<f4")
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise CheckpointError(
                f"blob {entry['name']}: {arr.size} values, shape {shape} needs {expected}"
            )
        arr = arr.reshape(shape).copy()
        if entry["kind"] == "param":
            params[entry["name"]] = arr
        elif entry["kind"] == "buffer":
            buffers[entry["name"]] = arr
        elif entry["kind"] == "threshold":
            thresholds[entry["name"]] = float(arr)
        else:
            raise CheckpointError(f"unknown blob kind {entry['kind']}")
    mask = None
    if header.get("mask") is not None:
        mask = SparsityMask(mask_arrays, header["mask"]["kappa"], header["mask"]["granularity"])
    return Checkpoint(spec, params, buffers, thresholds, mask, header.get("metadata", {}))


def sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()
