"""Confusion counts, overall accuracy, per-class IoU and mean IoU."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import LabelSchema, PointCloud

CSV_HEADER = ("group", "data_size", "rotation", "bim", "train_time_s", "oa", "miou")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes."""

    counts: np.ndarray
    schema: LabelSchema = LabelSchema()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.schema)


def confusion(gt, pred, schema: LabelSchema | None = None) -> ConfusionMatrix:
    schema = schema or LabelSchema()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if gt.shape != pred.shape:
        raise ValueError(f"length mismatch: {gt.size} ground-truth vs {pred.size} predicted labels")
    C = schema.C
    for arr in (gt, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise ValueError("label out of range")
    counts = np.bincount(gt * C + pred, minlength=C * C).reshape(C, C)
    return ConfusionMatrix(counts.astype(np.int64), schema)


def overall_accuracy(m: ConfusionMatrix) -> float:
    if m.total == 0:
        raise ValueError("overall accuracy of an empty confusion matrix")
    return int(np.trace(m.counts)) / m.total


def iou_per_class(m: ConfusionMatrix) -> list[float | None]:
    """IoU per class; ``None`` where the class is absent from both gt and pred."""
    if m.total == 0:
        raise ValueError("IoU of an empty confusion matrix")
    out: list[float | None] = []
    for tp, fp, fn in zip(m.tp.tolist(), m.fp.tolist(), m.fn.tolist()):
        den = tp + fp + fn
        out.append(tp / den if den else None)
    return out


def mean_iou(ious) -> float:
    """Mean over defined IoUs; undefined classes are skipped, not counted as 0."""
    vals = [v for v in ious if v is not None]
    if not vals:
        raise ValueError("mean IoU with every class undefined")
    return sum(vals) / len(vals)


def format_percent(value: float) -> str:
    return f"{100 * value:.2f}%"


@dataclass
class MetricsReport:
    oa: float
    iou_per_class: list[float | None]
    miou: float
    evaluated_points: int
    schema: LabelSchema = LabelSchema()
    group_id: str = ""
    train_time_s: float | None = None
    eval_time_s: float | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, m: ConfusionMatrix, **kw) -> "MetricsReport":
        ious = iou_per_class(m)
        return cls(overall_accuracy(m), ious, mean_iou(ious), m.total, m.schema, **kw)

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "oa": self.oa,
            "iou": dict(zip(self.schema.class_names, self.iou_per_class)),
            "miou": self.miou,
            "points": self.evaluated_points,
            "train_time_s": self.train_time_s,
            "eval_time_s": self.eval_time_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        schema = LabelSchema(tuple(d["iou"]))
        return cls(d["oa"], list(d["iou"].values()), d["miou"], d["points"], schema,
                   d.get("group_id", ""), d.get("train_time_s"), d.get("eval_time_s"))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def csv_row(self, data_size: str, rotation: str, bim: str) -> list[str]:
        t = "" if self.train_time_s is None else f"{self.train_time_s:.3f}"
        return [self.group_id, data_size, rotation, bim, t, f"{self.oa:.6f}", f"{self.miou:.6f}"]


def write_csv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def evaluate(ckpt, test_cloud: PointCloud, patch_size: int, seed: int = 0, group_id: str = "") -> MetricsReport:
    """Predict ``test_cloud`` with ``ckpt`` and score it against its labels."""
    from .nn.train import predict

    t0 = time.perf_counter()
    pred = predict(ckpt, test_cloud, patch_size, seed)
    m = confusion(test_cloud.labels, pred, test_cloud.schema)
    return MetricsReport.from_confusion(m, group_id=group_id, eval_time_s=time.perf_counter() - t0)
