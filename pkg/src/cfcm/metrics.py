"""Overlap, surface-distance and confusion metrics, and per-dataset metric reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

CSV_HEADER = ("sample_id", "class", "dice", "mad", "rms", "hd", "precision", "recall", "specificity",
              "balanced_accuracy")


class UndefinedMetricError(ValueError):
    """Surface distances need a non-empty mask on both sides."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_mask(m) -> np.ndarray:
    """Foreground pixels with a background (or out-of-image) 4-neighbour."""
    m = np.asarray(m, dtype=bool)
    if not m.any():
        raise UndefinedMetricError("boundary of an empty mask is undefined")
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def boundary_extract(m) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(boundary_mask(m))
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class SurfaceDistanceResult:
    mad: float
    rms: float
    hd: float


def _summarise(distances: np.ndarray) -> SurfaceDistanceResult:
    # a fixed (sorted) reduction order makes the result independent of argument order
    distances = np.sort(distances)
    return SurfaceDistanceResult(
        mad=float(distances.mean()),
        rms=float(np.sqrt((distances * distances).mean())),
        hd=float(distances.max()),
    )


def _directed_edt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # nearest dst-boundary pixel for every pixel, then the exact Euclidean length of that offset
    _, (iy, ix) = distance_transform_edt(~dst, return_indices=True)
    ys, xs = np.nonzero(src)
    dy = (ys - iy[ys, xs]).astype(np.float64)
    dx = (xs - ix[ys, xs]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def directed_distances(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Boundary-to-boundary distances a->b and b->a, each in row-major boundary order."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distances need two non-empty masks")
    ba, bb = boundary_mask(a), boundary_mask(b)
    return _directed_edt(ba, bb), _directed_edt(bb, ba)


def surface_distances(a, b) -> SurfaceDistanceResult:
    """MAD, RMS and Hausdorff distance over the symmetric multiset of boundary distances (pixels)."""
    ab, ba = directed_distances(a, b)
    return _summarise(np.concatenate([ab, ba]))


def surface_distances_bruteforce(a, b) -> SurfaceDistanceResult:
    """All-pairs reference for :func:`surface_distances`; quadratic in boundary length."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distances need two non-empty masks")
    pa = np.argwhere(boundary_mask(a))
    pb = np.argwhere(boundary_mask(b))

    def directed(src, dst):
        out = np.empty(len(src))
        for i, (y, x) in enumerate(src):
            best = math.inf
            for (v, u) in dst:
                d2 = float((y - v) ** 2 + (x - u) ** 2)
                best = min(best, d2)
            out[i] = math.sqrt(best)
        return out

    return _summarise(np.concatenate([directed(pa, pb), directed(pb, pa)]))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_masks(cls, pred, truth, class_id: int) -> "ConfusionCounts":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
        p, t = pred == class_id, truth == class_id
        return cls(int((p & t).sum()), int((p & ~t).sum()), int((~p & ~t).sum()), int((~p & t).sum()))


def _ratio(num: int, den: int) -> float:
    # 0/0 only happens when both the hits and the errors are zero: a vacuous, perfect score
    return 1.0 if den == 0 else num / den


def confusion_metrics(pred, truth, class_id: int) -> dict[str, float]:
    c = ConfusionCounts.from_masks(pred, truth, class_id)
    recall = _ratio(c.tp, c.tp + c.fn)
    specificity = _ratio(c.tn, c.tn + c.fp)
    return {
        "precision": _ratio(c.tp, c.tp + c.fp),
        "recall": recall,
        "specificity": specificity,
        "balanced_accuracy": (recall + specificity) / 2.0,
    }


def foreground_dice(pred, truth, label_count: int) -> float:
    return float(np.mean([dice_score(pred == k, truth == k) for k in range(1, label_count)]))


# ------------------------------------------------------------------------ reports

METRIC_KEYS = CSV_HEADER[2:]


@dataclass
class MetricReport:
    """Per-sample rows plus per-class aggregates (mean, population std)."""

    rows: list[dict] = field(default_factory=list)
    excluded: dict[int, int] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted({r["class"] for r in self.rows})

    def values(self, class_id: int, key: str) -> np.ndarray:
        vals = [r[key] for r in self.rows if r["class"] == class_id and r[key] is not None]
        return np.asarray(vals, dtype=np.float64)

    def aggregate(self, class_id: int) -> dict[str, tuple[float, float]]:
        out = {}
        for key in METRIC_KEYS:
            v = self.values(class_id, key)
            out[key] = (float(v.mean()), float(v.std())) if v.size else (math.nan, math.nan)
        return out

    def aggregate_rows(self, label: str = "aggregate") -> list[list[str]]:
        rows = []
        for k in self.classes:
            agg = self.aggregate(k)
            rows.append([label, str(k)] + [format_mean_std(*agg[key]) for key in METRIC_KEYS])
        return rows

    def to_csv(self, extra_aggregates: list[list[str]] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r["sample_id"], r["class"]] + [_fmt(r[k]) for k in METRIC_KEYS])
        for row in extra_aggregates or []:
            writer.writerow(row)
        for row in self.aggregate_rows():
            writer.writerow(row)
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def format_mean_std(mean: float, std: float) -> str:
    """``mean±std``: three decimals for the mean, std to at least three significant digits."""
    if math.isnan(mean):
        return "nan"
    decimals = 3
    if std > 0:
        decimals = max(3, 2 - math.floor(math.log10(std)))
    return f"{mean:.3f}±{std:.{decimals}f}"


def sample_metrics(pred: np.ndarray, truth: np.ndarray, class_id: int) -> dict:
    a, b = pred == class_id, truth == class_id
    row = {"dice": dice_score(a, b)}
    if a.any() and b.any():
        sd = surface_distances(a, b)
        row.update(mad=sd.mad, rms=sd.rms, hd=sd.hd)
    else:
        row.update(mad=None, rms=None, hd=None)
    row.update(confusion_metrics(pred, truth, class_id))
    return row


def evaluate_labels(preds: np.ndarray, truths: np.ndarray, ids: list[str], label_count: int,
                    report: MetricReport | None = None) -> MetricReport:
    report = report if report is not None else MetricReport()
    for sid, pred, truth in zip(ids, preds, truths):
        for k in range(1, label_count):
            row = sample_metrics(pred, truth, k)
            if row["mad"] is None:
                report.excluded[k] = report.excluded.get(k, 0) + 1
            report.rows.append({"sample_id": sid, "class": k, **row})
    return report


def evaluate_model(model, dataset, num_classes: int | None = None, batch_size: int = 16) -> MetricReport:
    """Predict every sample (eval mode) and score each foreground class.

    Samples whose prediction or truth is empty for a class get no surface
    distances; they are counted in ``report.excluded`` instead.
    """
    from .training import predict, predict_labels

    label_count = dataset.label_count if num_classes is None else (2 if num_classes == 1 else num_classes)
    preds = predict_labels(predict(model, dataset.images, batch_size))
    return evaluate_labels(preds, dataset.masks, dataset.ids, label_count)
