"""Checkpoint files.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"RSEG"
    4       2     u16 format version (currently 1)
    6       4     u32 J, length of the JSON header
    10      J     UTF-8 JSON header (network config, schema, training state)
    10+J    4     u32 T, number of tensors
    then T records:
            2     u16 name length N
            N     UTF-8 tensor name
            1     u8 dtype code (0 = float32, 1 = float64)
            1     u8 ndim D
            4*D   u32 dimensions
            ...   raw little-endian values, row-major

Tensor names are ``param/<layer>.w``, ``param/<layer>.b`` followed by the
Adam moments ``adam_m/...`` and ``adam_v/...`` in the same layer order. The
JSON header is written with sorted keys and no whitespace so that equal
checkpoints serialize to equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..pointcloud import LabelSchema
from .network import NetConfig, SegNetwork

MAGIC = b"RSEG"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    config: NetConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int = 0
    epoch: int = 0
    seed: int = 0
    schema: LabelSchema = LabelSchema()

    @classmethod
    def from_network(cls, net: SegNetwork, seed: int = 0, schema: LabelSchema | None = None) -> "Checkpoint":
        zeros = {k: np.zeros_like(v) for k, v in net.params.items()}
        return cls(net.config, {k: v.copy() for k, v in net.params.items()},
                   zeros, {k: v.copy() for k, v in zeros.items()}, 0, 0, seed,
                   schema or LabelSchema())

    def network(self) -> SegNetwork:
        return SegNetwork(self.config, {k: v.copy() for k, v in self.params.items()})

    def header(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "schema": list(self.schema.class_names),
            "epoch": self.epoch,
            "seed": self.seed,
            "adam_step": self.adam_step,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        out = [MAGIC, struct.pack("<HI", VERSION, len(head)), head]
        tensors = []
        for group, store in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name, _, _, _ in self.config.layer_shapes():
                for suffix in (".w", ".b"):
                    tensors.append((f"{group}/{name}{suffix}", store[name + suffix]))
        out.append(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            bname = name.encode()
            out.append(struct.pack("<H", len(bname)) + bname)
            out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic")
        try:
            version, jlen = struct.unpack_from("<HI", data, 4)
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            head = json.loads(data[10:10 + jlen].decode())
            off = 10 + jlen
            (count,) = struct.unpack_from("<I", data, off)
            off += 4
            stores: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, off)
                off += 2
                name = data[off:off + nlen].decode()
                off += nlen
                code, ndim = struct.unpack_from("<BB", data, off)
                off += 2
                shape = struct.unpack_from(f"<{ndim}I", data, off)
                off += 4 * ndim
                dt = _DTYPES[code]
                size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
                if off + size > len(data):
                    raise CheckpointError("truncated tensor data")
                arr = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off)
                off += size
                group, key = name.split("/", 1)
                stores[group][key] = arr.reshape(shape).astype(dt.newbyteorder("="))
        except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        return cls(
            config=NetConfig.from_dict(head["config"]),
            params=stores["param"],
            adam_m=stores["adam_m"],
            adam_v=stores["adam_v"],
            adam_step=head["adam_step"],
            epoch=head["epoch"],
            seed=head["seed"],
            schema=LabelSchema(tuple(head["schema"])),
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
