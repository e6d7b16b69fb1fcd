"""Confusion-matrix mIoU and per-class boundary F-score."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from decoupleseg.errors import DimensionError
from decoupleseg.supervision import IGNORE_INDEX

DESK_SLACKS = (1, 2, 3, 5)
LARGE_SLACKS = (3, 5, 9, 12)


class ConfusionMatrix:
    """K x K counts; rows are ground-truth classes, columns predictions."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
        valid = gt != self.ignore_index
        k = self.num_classes
        idx = gt[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm: ConfusionMatrix | np.ndarray):
    """Per-class IoU (NaN where the union is empty) and their mean."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    iou = np.divide(tp, union, out=np.full_like(tp, np.nan), where=union > 0)
    return iou, float(np.nanmean(iou))


# ------------------------------------------------------------ boundaries

def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with a 4-neighbour outside it or on the image border."""
    mask = mask.astype(bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=0)
    return mask & ~inner


def _within_slack_dt(src: np.ndarray, dst: np.ndarray, slack: float, metric: str) -> np.ndarray:
    """For each pixel of ``src``: is some pixel of ``dst`` within ``slack``?"""
    if not dst.any():
        return np.zeros(int(src.sum()), dtype=bool)
    if metric == "euclidean":
        dist = ndimage.distance_transform_edt(~dst)
    else:
        dist = ndimage.distance_transform_cdt(~dst, metric="chessboard").astype(np.float64)
    return dist[src] <= slack


def _within_slack_pairwise(src: np.ndarray, dst: np.ndarray, slack: float, metric: str) -> np.ndarray:
    a = np.argwhere(src)
    b = np.argwhere(dst)
    if len(b) == 0:
        return np.zeros(len(a), dtype=bool)
    d = a[:, None, :] - b[None, :, :]
    if metric == "euclidean":
        d2 = (d * d).sum(axis=-1)
        return (d2 <= slack * slack).any(axis=1)
    return (np.abs(d).max(axis=-1) <= slack).any(axis=1)


@dataclass
class BoundaryScore:
    precision: float
    recall: float
    f: float
    n_pred: int = 0
    n_gt: int = 0


def boundary_fscore(pred, gt, class_id, slack_px, metric="euclidean", method="dt",
                    ignore_index=IGNORE_INDEX):
    """Boundary precision/recall/F for one class, or None if the class is
    absent from both maps.

    ``method="pairwise"`` uses an O(N^2) distance matrix instead of the
    distance transform; both are exact. Pixels whose ground truth is
    ``ignore_index`` are removed from both masks.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    if slack_px < 0:
        raise ValueError("slack must be non-negative")
    keep = gt != ignore_index
    pm = (pred == class_id) & keep
    gm = gt == class_id
    if not pm.any() and not gm.any():
        return None
    pb, gb = mask_boundary(pm), mask_boundary(gm)
    near = _within_slack_dt if method == "dt" else _within_slack_pairwise
    hit_p = near(pb, gb, slack_px, metric)
    hit_r = near(gb, pb, slack_px, metric)
    p = float(hit_p.mean()) if hit_p.size else 0.0
    r = float(hit_r.mean()) if hit_r.size else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return BoundaryScore(p, r, f, int(pb.sum()), int(gb.sum()))


# ------------------------------------------------------------ reporting

@dataclass
class SegEvaluator:
    """Accumulates mIoU counts and per-image boundary F over a dataset."""

    num_classes: int
    slacks: tuple = DESK_SLACKS
    ignore_index: int = IGNORE_INDEX
    cm: ConfusionMatrix = field(init=False)
    f_values: list = field(init=False)

    def __post_init__(self):
        self.slacks = tuple(int(s) for s in self.slacks)
        self.cm = ConfusionMatrix(self.num_classes, self.ignore_index)
        # per (class, slack) lists; fsum keeps the mean independent of image order
        self.f_values = [[[] for _ in self.slacks] for _ in range(self.num_classes)]

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        self.cm.update(pred, gt)
        for c in range(self.num_classes):
            for j, s in enumerate(self.slacks):
                res = boundary_fscore(pred, gt, c, s, ignore_index=self.ignore_index)
                if res is not None:
                    self.f_values[c][j].append(res.f)

    def report(self) -> dict:
        iou, mean_iou = miou(self.cm)
        fmean = np.array([[math.fsum(v) / len(v) if v else np.nan for v in row]
                          for row in self.f_values]).reshape(self.num_classes, len(self.slacks))
        per_class = {}
        for c in range(self.num_classes):
            entry = {"iou": None if np.isnan(iou[c]) else float(iou[c])}
            for j, s in enumerate(self.slacks):
                entry[f"f@{s}"] = None if np.isnan(fmean[c, j]) else float(fmean[c, j])
            per_class[str(c)] = entry
        rep = {"per_class": per_class, "mean_iou": mean_iou}
        for j, s in enumerate(self.slacks):
            col = fmean[:, j]
            rep[f"mean_f@{s}"] = float(np.nanmean(col)) if np.isfinite(col).any() else None
        return rep


def report(results: dict) -> tuple[str, str]:
    """Serialise an evaluator report to (JSON text, CSV text)."""
    return report_to_json(results), report_to_csv(results)


def report_to_json(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True)


def report_from_json(text: str) -> dict:
    return json.loads(text)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_to_csv(rep: dict) -> str:
    """One row per class plus a ``mean`` row; floats written with repr."""
    slack_keys = sorted((k[len("mean_"):] for k in rep if k.startswith("mean_f@")),
                        key=lambda k: int(k[2:]))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["class", "iou"] + slack_keys)
    for c, entry in rep["per_class"].items():
        wr.writerow([c, _fmt(entry["iou"])] + [_fmt(entry[k]) for k in slack_keys])
    wr.writerow(["mean", _fmt(rep["mean_iou"])] + [_fmt(rep["mean_" + k]) for k in slack_keys])
    return buf.getvalue()


def report_from_csv(text: str) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    slack_keys = header[2:]
    parse = lambda v: None if v == "" else float(v)  # noqa: E731
    rep: dict = {"per_class": {}}
    for row in rows[1:]:
        vals = dict(zip(header[1:], map(parse, row[1:])))
        if row[0] == "mean":
            rep["mean_iou"] = vals["iou"]
            for k in slack_keys:
                rep["mean_" + k] = vals[k]
        else:
            rep["per_class"][row[0]] = vals
    return rep
