"""SGD training with a poly schedule, evaluation and raster inspection."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from decoupleseg import ops
from decoupleseg.errors import NonFiniteError
from decoupleseg.metrics import DESK_SLACKS, SegEvaluator, report_to_csv, report_to_json
from decoupleseg.model import ModelConfig, SegNet
from decoupleseg.rasters import write_pgm, write_ppm
from decoupleseg.supervision import LossConfig, total_loss
from decoupleseg.synth import BASE_COLORS, load_split, read_manifest
from decoupleseg.tensor import ParamStore, check_finite, write_dsk1
from decoupleseg.warp import flow_to_raster

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "decoupleseg-checkpoint/1"
LOG_FIELDS = ["epoch", "lr", "l_body", "l_bce", "l_edge_ce", "l_final", "total",
              "selected", "max_identity_err"]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    seed: int = 0
    mode: str = "decoupled"
    slacks: tuple = DESK_SLACKS
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.slacks = tuple(int(s) for s in self.slacks)
        if self.mode not in ("baseline", "decoupled"):
            raise ValueError(f"mode must be baseline or decoupled, got {self.mode!r}")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.base_lr <= 0 or self.poly_power <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimiser settings")
        # copies, so shared config objects passed in are never mutated
        self.model = replace(self.model, mode=self.mode)
        if self.mode == "baseline":
            self.loss = replace(self.loss, lambda_body=0.0, lambda_edge=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slacks"] = list(self.slacks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def poly_lr(base_lr: float, it: int, total: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - it / total) ** power


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, store: ParamStore, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, lr: float) -> None:
        for name, t in self.store.items():
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad + self.weight_decay * t.data
            t.data -= lr * v


def normalize_images(images: np.ndarray) -> np.ndarray:
    return ((images - 0.5) / 0.25).astype(np.float32)


def _write_log(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def evaluate_net(net: SegNet, images: np.ndarray, labels: np.ndarray, slacks=DESK_SLACKS,
                 batch_size: int = 16) -> dict:
    ev = SegEvaluator(net.cfg.num_classes, slacks)
    for i in range(0, len(images), batch_size):
        pred = net.predict(normalize_images(images[i:i + batch_size]))
        for p, g in zip(pred, labels[i:i + batch_size]):
            ev.add(p, g)
    return ev.report()


def train(cfg: TrainConfig, dataset_dir: str, out_dir: str | None = None, val_every: int = 0):
    """Train on the dataset's train split.

    Returns ``(net, log_rows, val_report)``. When ``out_dir`` is given the
    checkpoint, ``train_log.csv``, ``val_metrics.json`` and
    ``val_metrics.csv`` are written there. ``val_every`` > 0 adds val mIoU
    to the log every that many epochs.
    """
    images, labels = load_split(dataset_dir, "train")
    val_images, val_labels = load_split(dataset_dir, "val")
    num_classes = int(read_manifest(dataset_dir)["spec"]["num_classes"])
    if cfg.model.num_classes != num_classes:
        raise ValueError(f"model has {cfg.model.num_classes} classes, dataset has {num_classes}")
    x_all = normalize_images(images)

    net = SegNet.create(cfg.model, seed=cfg.seed)
    opt = SGD(net.store, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = -(-len(images) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    rows = []
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        sums = dict.fromkeys(("l_body", "l_bce", "l_edge_ce", "l_final", "total"), 0.0)
        selected = 0
        max_err = 0.0
        lr = poly_lr(cfg.base_lr, it, total_steps, cfg.poly_power)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            lr = poly_lr(cfg.base_lr, it, total_steps, cfg.poly_power)
            net.store.zero_grad()
            out, cache = net.forward(x_all[idx])
            br, grads = total_loss(out, labels[idx], cfg.loss)
            if not np.isfinite(br.total):
                dump = os.path.join(out_dir or ".", "nonfinite_batch.dsk1")
                write_dsk1(dump, images[idx])
                raise NonFiniteError(f"non-finite loss at epoch {epoch} step {s}; batch dumped to {dump}")
            max_err = max(max_err, abs(br.total - br.reconstruct(cfg.loss)))
            net.backward(grads, cache)
            for name, t in net.store.items():
                check_finite(t.grad, name + ".grad")
            opt.step(lr)
            for k in sums:
                sums[k] += getattr(br, k)
            selected += br.selected_count
            it += 1
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / steps_per_epoch for k, v in sums.items()})
        row.update(selected=selected, max_identity_err=max_err)
        if val_every and ((epoch + 1) % val_every == 0 or epoch + 1 == cfg.epochs):
            row["val_miou"] = evaluate_net(net, val_images, val_labels, cfg.slacks)["mean_iou"]
        rows.append(row)
        log.info("epoch %d: %s", epoch, row)

    val_report = evaluate_net(net, val_images, val_labels, cfg.slacks)
    if out_dir is not None:
        save_checkpoint(net, cfg, os.path.join(out_dir, "checkpoint"))
        os.makedirs(out_dir, exist_ok=True)
        if val_every:
            for r in rows:
                r.setdefault("val_miou", "")
        _write_log(os.path.join(out_dir, "train_log.csv"), rows)
        write_report(val_report, out_dir, "val_metrics")
    return net, rows, val_report


def write_report(rep: dict, out_dir: str, stem: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, stem + ".json"), "w") as fh:
        fh.write(report_to_json(rep))
    with open(os.path.join(out_dir, stem + ".csv"), "w") as fh:
        fh.write(report_to_csv(rep))


def save_checkpoint(net: SegNet, cfg: TrainConfig | None, directory: str) -> None:
    extra = {"format": CHECKPOINT_FORMAT, "model": net.cfg.to_dict()}
    if cfg is not None:
        extra["train"] = cfg.to_dict()
    net.store.save(directory, extra)


def load_checkpoint(directory: str) -> SegNet:
    store, manifest = ParamStore.load(directory)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory} is not a checkpoint (format {manifest.get('format')!r})")
    return SegNet(ModelConfig(**manifest["model"]), store)


def evaluate(checkpoint_dir: str, dataset_dir: str, slacks=DESK_SLACKS, split: str = "val",
             order: np.ndarray | None = None) -> dict:
    net = load_checkpoint(checkpoint_dir)
    images, labels = load_split(dataset_dir, split)
    spec = read_manifest(dataset_dir)["spec"]
    if spec["num_classes"] != net.cfg.num_classes:
        raise ValueError(f"checkpoint has {net.cfg.num_classes} classes, dataset has {spec['num_classes']}")
    if order is not None:
        images, labels = images[order], labels[order]
    return evaluate_net(net, images, labels, slacks)


# ------------------------------------------------------------ inspection

def colorize(labels: np.ndarray) -> np.ndarray:
    palette = np.vstack([BASE_COLORS, np.zeros((256 - len(BASE_COLORS), 3))])
    return np.round(palette[labels] * 255).astype(np.uint8)


def _minmax_u8(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)


def inspect_files(cfg: ModelConfig) -> list[str]:
    """File names ``inspect`` writes for a model of this configuration."""
    files = ["image.ppm", "pred.ppm"]
    if cfg.mode == "decoupled":
        files += ["flow.ppm", "edge_prob.pgm", "edge_mask.pgm", "edge_prob.dsk1"]
        files += [f"f_body_{c:02d}.pgm" for c in range(cfg.channels)]
        files += [f"f_edge_{c:02d}.pgm" for c in range(cfg.channels)]
    return files


def inspect(net: SegNet, image: np.ndarray, out_dir: str, t_b: float = 0.8) -> list[str]:
    """Dump rasters for one (3,H,W) image; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    out, _ = net.forward(normalize_images(image[None]))
    written = []

    def put(name, writer, arr):
        path = os.path.join(out_dir, name)
        writer(path, arr)
        written.append(path)

    put("image.ppm", write_ppm, np.round(np.clip(image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8))
    put("pred.ppm", write_ppm, colorize(out.s_final[0].argmax(axis=0)))
    if out.head is not None:
        head = out.head
        put("flow.ppm", write_ppm, flow_to_raster(head.flow[0]))
        prob, _ = ops.sigmoid(head.b_logit[0, 0].astype(np.float64))
        put("edge_prob.pgm", write_pgm, np.round(prob * 255).astype(np.uint8))
        put("edge_mask.pgm", write_pgm, np.where(prob > t_b, 255, 0).astype(np.uint8))
        put("edge_prob.dsk1", write_dsk1, prob)
        for c in range(head.f_body.shape[1]):
            put(f"f_body_{c:02d}.pgm", write_pgm, _minmax_u8(head.f_body[0, c]))
        for c in range(head.f_edge.shape[1]):
            put(f"f_edge_{c:02d}.pgm", write_pgm, _minmax_u8(head.f_edge[0, c]))
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump([os.path.basename(p) for p in written], fh, indent=1)
    return written
