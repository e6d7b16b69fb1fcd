"""Dense tensor container, parameter store and the DSK1 file format."""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from typing import Iterator

import numpy as np

from decoupleseg.errors import DimensionError, NonFiniteError

DSK1_MAGIC = b"DSK1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class Tensor:
    """Numeric array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError(f"grad shape {grad.shape} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def check_finite(self, name: str = "tensor") -> None:
        check_finite(self.data, name)
        if self.grad is not None:
            check_finite(self.grad, name + ".grad")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def check_finite(a: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteError(f"{name} has non-finite value at index {tuple(int(i) for i in bad)}")


class ParamStore:
    """Named parameters with deterministic (insertion) iteration order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter path {name!r}")
        t = Tensor(data)
        t.zero_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def value(self, name: str) -> np.ndarray:
        return self._params[name].data

    def grad(self, name: str, g: np.ndarray) -> None:
        """Accumulate ``g`` into the gradient of ``name``."""
        self._params[name].accumulate(g)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def save(self, directory: str, extra: dict | None = None) -> str:
        """Write every parameter as a DSK1 file plus ``manifest.json``."""
        os.makedirs(os.path.join(directory, "params"), exist_ok=True)
        files = OrderedDict()
        for i, (name, t) in enumerate(self._params.items()):
            rel = os.path.join("params", f"{i:03d}_{name.replace('/', '_')}.dsk1")
            write_dsk1(os.path.join(directory, rel), t.data)
            files[name] = rel
        manifest = {"params": files}
        if extra:
            manifest.update(extra)
        path = os.path.join(directory, "manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=False)
        return path

    @classmethod
    def load(cls, directory: str) -> tuple["ParamStore", dict]:
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        store = cls()
        for name, rel in manifest["params"].items():
            store.add(name, read_dsk1(os.path.join(directory, rel)))
        return store, manifest


def encode_dsk1(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    dt = a.dtype.newbyteorder("<") if a.dtype.kind == "f" else a.dtype
    if dt not in _DTYPE_CODES:
        raise TypeError(f"DSK1 supports float32/float64, got {a.dtype}")
    header = DSK1_MAGIC + struct.pack("<BB", _DTYPE_CODES[dt], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=dt).tobytes(order="C")


def decode_dsk1(buf: bytes) -> np.ndarray:
    if buf[:4] != DSK1_MAGIC:
        raise ValueError("not a DSK1 payload (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown DSK1 dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    off = 6 + 4 * rank
    dt = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != count * dt.itemsize:
        raise ValueError("DSK1 payload length does not match header dims")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_dsk1(path: str, a: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dsk1(a))


def read_dsk1(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_dsk1(fh.read())
