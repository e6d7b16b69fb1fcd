"""Binary PGM (P5) / PPM (P6) readers and writers for label maps and dumps."""

from __future__ import annotations

import numpy as np


def write_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D raster, got shape {img.shape}")
    if img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


def write_ppm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an H×W×3 raster, got shape {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def _read_netpbm(path: str, magic: bytes) -> tuple[int, int, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit rasters are supported")
    return w, h, data[pos + 1 :]


def read_pgm(path: str) -> np.ndarray:
    w, h, payload = _read_netpbm(path, b"P5")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def read_ppm(path: str) -> np.ndarray:
    w, h, payload = _read_netpbm(path, b"P6")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()
