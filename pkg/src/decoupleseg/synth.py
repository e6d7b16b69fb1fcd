"""Procedural scenes of coloured shapes with exact pixel labels."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from decoupleseg.rasters import read_pgm, write_pgm
from decoupleseg.tensor import read_dsk1, write_dsk1

SHAPE_KINDS = ("rectangle", "ellipse", "triangle", "bar")
SPLITS = {"train": 0, "val": 1}

# background first, then one colour per shape kind
BASE_COLORS = np.array([
    [0.45, 0.45, 0.45],
    [0.72, 0.38, 0.36],
    [0.38, 0.66, 0.42],
    [0.38, 0.42, 0.72],
    [0.70, 0.66, 0.34],
])


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 5
    min_shapes: int = 2
    max_shapes: int = 6
    kinds: tuple = SHAPE_KINDS
    noise_sigma: float = 0.12
    blur_radius: float = 0.8

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if self.height % 4 or self.width % 4 or self.height < 8 or self.width < 8:
            raise ValueError("canvas sides must be multiples of 4 and at least 8")
        if not 2 <= self.num_classes <= len(BASE_COLORS):
            raise ValueError(f"num_classes must be in [2, {len(BASE_COLORS)}]")
        if len(self.kinds) < self.num_classes - 1 or any(k not in SHAPE_KINDS for k in self.kinds):
            raise ValueError(f"need {self.num_classes - 1} kinds from {SHAPE_KINDS}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        return d


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _rasterize(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = _grid(h, w)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "rectangle":
        hh, hw = rng.uniform(4, 14, size=2)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "ellipse":
        ry, rx = rng.uniform(4, 13, size=2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "triangle":
        pts = np.array([cy, cx]) + rng.uniform(-14, 14, size=(3, 2))
        inside = np.ones((h, w), dtype=bool)
        u, v = pts[1] - pts[0], pts[2] - pts[0]
        sign = np.sign(u[0] * v[1] - u[1] * v[0]) or 1.0
        for i in range(3):
            a, b = pts[i], pts[(i + 1) % 3]
            cross = (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
            inside &= sign * cross <= 0
        return inside
    if kind == "bar":
        # thin segment, 1-3 px thick
        length = rng.uniform(16, 48)
        theta = rng.uniform(0, np.pi)
        half = rng.integers(1, 4) / 2.0
        dy, dx = np.sin(theta), np.cos(theta)
        py, px = yy - cy, xx - cx
        along = np.clip(py * dy + px * dx, -length / 2, length / 2)
        dist = np.hypot(py - along * dy, px - along * dx)
        return dist <= half
    raise ValueError(f"unknown shape kind {kind!r}")


def scene_rng(master_seed: int, split: int = 0, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(split), int(index)])


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None, n_shapes: int | None = None):
    """Render one scene; returns ``(image float32 (3,H,W), labels uint8 (H,W))``.

    Shapes are painted back to front, so later shapes occlude earlier ones.
    Blur and noise touch the image only; labels stay crisp.
    """
    rng = scene_rng(spec.seed) if rng is None else rng
    h, w = spec.height, spec.width
    forced = n_shapes is not None
    while True:
        count = n_shapes if forced else int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        labels = np.zeros((h, w), dtype=np.uint8)
        for _ in range(count):
            cls = int(rng.integers(1, spec.num_classes))
            labels[_rasterize(spec.kinds[cls - 1], rng, h, w)] = cls
        if forced or count == 0 or len(np.unique(labels)) >= 2:
            break
    clean = BASE_COLORS[labels].transpose(2, 0, 1)
    if spec.blur_radius > 0:
        clean = np.stack([ndimage.gaussian_filter(ch, spec.blur_radius, mode="nearest") for ch in clean])
    image = clean + rng.normal(0.0, spec.noise_sigma, size=clean.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate_dataset(n_train: int, n_val: int, spec: SceneSpec, out_dir: str) -> dict:
    """Write images/*.dsk1, labels/*.pgm and manifest.json; returns the manifest."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    manifest = {"spec": spec.to_dict(), "splits": {}}
    for split, count in (("train", n_train), ("val", n_val)):
        code = SPLITS[split]
        items = []
        for i in range(count):
            image, labels = generate_scene(spec, scene_rng(spec.seed, code, i))
            stem = f"{split}_{i:05d}"
            img_rel = f"images/{stem}.dsk1"
            lab_rel = f"labels/{stem}.pgm"
            write_dsk1(os.path.join(out_dir, img_rel), image)
            write_pgm(os.path.join(out_dir, lab_rel), labels)
            items.append({"image": img_rel, "labels": lab_rel, "seed": [spec.seed, code, i]})
        manifest["splits"][split] = {"seed": [spec.seed, code], "count": count, "items": items}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_manifest(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    if "splits" not in manifest or "spec" not in manifest:
        raise ValueError(f"{path} is not a dataset manifest")
    return manifest


def load_split(dataset_dir: str, split: str):
    """Stack a split into ``(images (N,3,H,W) float32, labels (N,H,W) uint8)``."""
    manifest = read_manifest(dataset_dir)
    items = manifest["splits"][split]["items"]
    images = np.stack([read_dsk1(os.path.join(dataset_dir, it["image"])) for it in items])
    labels = np.stack([read_pgm(os.path.join(dataset_dir, it["labels"])) for it in items])
    return images.astype(np.float32), labels
