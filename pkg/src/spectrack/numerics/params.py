"""Named parameter store and the portable checkpoint container.

Checkpoint layout (version 1, all integers little-endian):

    bytes 0..3    magic ``b"MSPC"``
    bytes 4..7    format version (uint32)
    bytes 8..11   header length ``n`` (uint32)
    bytes 12..12+n  JSON header: ``{"entries": [{"name", "dtype", "shape",
                  "offset", "trainable"}, ...]}`` with offsets relative to
                  the payload start
    remainder     payload: raw little-endian element bytes, concatenated in
                  entry order

``dtype`` is ``"float32"`` or ``"float64"``; elements are stored C-ordered.
"""

from __future__ import annotations

import json
import struct
from typing import Iterator

import numpy as np

from .tensor import Tensor

MAGIC = b"MSPC"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class ParamStore:
    """Map from hierarchical dot-separated names to parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(value), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, trainable: bool) -> None:
        self._trainable[name] = trainable
        self._params[name].requires_grad = trainable

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if self._trainable[n])

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_elements(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def set_value(self, name: str, value: np.ndarray) -> None:
        """Overwrite elements; shapes are immutable after creation."""
        t = self._params[name]
        value = np.asarray(value)
        if value.shape != t.data.shape:
            raise ValueError(
                f"shape of {name!r} is immutable: {t.data.shape} vs {value.shape}"
            )
        t.data = value.astype(t.data.dtype)

    # -- checkpoint i/o ------------------------------------------------------

    def save(self, path) -> None:
        entries = []
        payload = bytearray()
        for name, t in self._params.items():
            dtype = str(t.data.dtype)
            if dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {dtype} for {name!r}")
            raw = np.ascontiguousarray(t.data).astype(_DTYPES[dtype]).tobytes()
            entries.append(
                {
                    "name": name,
                    "dtype": dtype,
                    "shape": list(t.data.shape),
                    "offset": len(payload),
                    "trainable": self._trainable[name],
                }
            )
            payload.extend(raw)
        header = json.dumps({"entries": entries}).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(payload)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[12:12 + hlen].decode())
        payload = blob[12 + hlen:]
        store = cls()
        for e in header["entries"]:
            dt = np.dtype(_DTYPES[e["dtype"]])
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            raw = payload[e["offset"]:e["offset"] + n * dt.itemsize]
            if len(raw) != n * dt.itemsize:
                raise CheckpointError(f"truncated payload for {e['name']!r}")
            arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(e["dtype"])
            store.add(e["name"], arr, trainable=e["trainable"])
        return store


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal draws re-sampled until within +/-2 std (ViT-style init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)
