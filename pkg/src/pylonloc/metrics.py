"""Localization and classification metrics: IoU/IoR accuracy, point localization, AUROC."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .data import BBox
from .errors import ConfigurationError, UndefinedMetricError


@dataclass
class GtInstance:
    image_id: str
    class_id: int
    boxes: List[BBox]

    def __post_init__(self):
        if not self.boxes:
            raise ConfigurationError("a ground-truth instance needs at least one box")


def minmax_binarize(cam: np.ndarray, thr: float = 0.5) -> np.ndarray:
    """Scale ``cam`` to [0, 1] by its own min/max and threshold; a flat map yields an all-ones mask."""
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = cam.min(), cam.max()
    if hi == lo:
        return np.ones(cam.shape, dtype=bool)
    return (cam - lo) / (hi - lo) >= thr


def rasterize(boxes: Sequence[BBox], shape: Tuple[int, int]) -> np.ndarray:
    """Union of boxes as a boolean grid; pixel (r, c) is inside when x <= c <= x+w-1 and y <= r <= y+h-1."""
    h, w = shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    mask = np.zeros(shape, dtype=bool)
    for b in boxes:
        mask |= (cols >= b.x) & (cols <= b.x + b.w - 1) & (rows >= b.y) & (rows <= b.y + b.h - 1)
    return mask


def iou_ior(mask: np.ndarray, gt: GtInstance) -> Tuple[float, float, bool]:
    """(IoU, IoR, empty_mask) of a binary detection against the union of the instance's boxes.

    IoR divides the intersection by the whole detected region. An empty mask
    gives IoR = 0 with the flag set.
    """
    mask = np.asarray(mask, dtype=bool)
    region = rasterize(gt.boxes, mask.shape)
    inter = int(np.count_nonzero(mask & region))
    union = int(np.count_nonzero(mask | region))
    detected = int(np.count_nonzero(mask))
    iou = inter / union if union else 0.0
    if detected == 0:
        return iou, 0.0, True
    return iou, inter / detected, False


def point_localization(cam: np.ndarray, gt: GtInstance) -> int:
    """1 when the first row-major argmax of ``cam`` lies inside any of the instance's boxes."""
    cam = np.asarray(cam)
    r, c = np.unravel_index(int(np.argmax(cam)), cam.shape)
    return int(any(b.contains(int(r), int(c)) for b in gt.boxes))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative sample")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class InstanceRecord:
    image_id: str
    class_id: int
    point_hit: int
    iou: float
    ior: float
    empty_mask: bool = False
    boundary_taus: List[float] = field(default_factory=list)


def evaluate_instance(cam: np.ndarray, gt: GtInstance, taus: Sequence[float] = (0.25, 0.5),
                      thr: float = 0.5) -> InstanceRecord:
    mask = minmax_binarize(cam, thr)
    iou, ior, empty = iou_ior(mask, gt)
    boundary = [t for t in taus if iou == t or ior == t]
    return InstanceRecord(gt.image_id, gt.class_id, point_localization(cam, gt), iou, ior, empty, boundary)


def localization_hit(rec: InstanceRecord, tau: float) -> bool:
    return rec.iou > tau or rec.ior > tau


def localization_accuracy(records: Iterable[InstanceRecord], tau: float) -> Dict[int, float]:
    """Per-class fraction of instances with IoU > tau or IoR > tau (strict)."""
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"tau must lie in (0, 1), got {tau}")
    hits: Dict[int, List[bool]] = {}
    for rec in records:
        hits.setdefault(rec.class_id, []).append(localization_hit(rec, tau))
    return {c: float(np.mean(v)) for c, v in sorted(hits.items())}


def point_accuracy(records: Iterable[InstanceRecord]) -> Dict[int, float]:
    hits: Dict[int, List[int]] = {}
    for rec in records:
        hits.setdefault(rec.class_id, []).append(rec.point_hit)
    return {c: float(np.mean(v)) for c, v in sorted(hits.items())}


def weighted_average(per_class: Dict[int, float], counts: Dict[int, int]) -> float:
    total = sum(counts.get(c, 0) for c in per_class)
    if total <= 0:
        raise UndefinedMetricError("weighted average over zero instances")
    return float(sum(per_class[c] * counts.get(c, 0) for c in per_class) / total)


@dataclass
class MetricsReport:
    class_names: List[str]
    counts: Dict[int, int]
    point: Dict[int, float]
    localization: Dict[float, Dict[int, float]]
    auroc: Dict[int, float]
    weighted_point: float
    weighted_localization: Dict[float, float]
    macro_auroc: Optional[float]
    notes: List[str] = field(default_factory=list)
    records: List[InstanceRecord] = field(default_factory=list)

    def point_for(self, name: str) -> float:
        return self.point[self.class_names.index(name)]

    def to_csv(self) -> str:
        """Table-style CSV: one row per metric, one column per class plus the averages."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        classes = list(range(len(self.class_names)))
        writer.writerow(["metric", *self.class_names, "weighted_avg", "macro_avg"])

        def cells(values: Dict[int, float]) -> List[str]:
            return [f"{values[c]:.6f}" if c in values else "" for c in classes]

        for tau in sorted(self.localization):
            writer.writerow([f"loc_acc_tau{tau:g}", *cells(self.localization[tau]),
                             f"{self.weighted_localization[tau]:.6f}", ""])
        writer.writerow(["point_loc_acc", *cells(self.point), f"{self.weighted_point:.6f}", ""])
        macro = "" if self.macro_auroc is None else f"{self.macro_auroc:.6f}"
        writer.writerow(["auroc", *cells(self.auroc), "", macro])
        writer.writerow(["count", *[str(self.counts.get(c, 0)) if c in self.counts else "" for c in classes],
                         str(sum(self.counts.values())), ""])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "class_names": self.class_names,
            "counts": {self.class_names[c]: n for c, n in self.counts.items()},
            "point_loc_acc": {self.class_names[c]: v for c, v in self.point.items()},
            "loc_acc": {f"{t:g}": {self.class_names[c]: v for c, v in d.items()} for t, d in self.localization.items()},
            "auroc": {self.class_names[c]: v for c, v in self.auroc.items()},
            "weighted_point_loc_acc": self.weighted_point,
            "weighted_loc_acc": {f"{t:g}": v for t, v in self.weighted_localization.items()},
            "macro_auroc": self.macro_auroc,
            "notes": self.notes,
            "instances": [asdict(r) for r in self.records],
        }
        return json.dumps(payload, indent=1, sort_keys=True)


def aggregate(records: Sequence[InstanceRecord], class_names: Sequence[str], taus: Sequence[float] = (0.25, 0.5),
              auroc_by_class: Optional[Dict[int, float]] = None) -> MetricsReport:
    """Fold per-instance records (sorted by image id, class) into per-class and weighted rows."""
    records = sorted(records, key=lambda r: (r.class_id, r.image_id))
    counts: Dict[int, int] = {}
    for r in records:
        counts[r.class_id] = counts.get(r.class_id, 0) + 1
    if not counts:
        raise UndefinedMetricError("no ground-truth instances to aggregate")
    notes = [f"class {name!r} has no annotated instances; omitted"
             for c, name in enumerate(class_names) if c not in counts]
    point = point_accuracy(records)
    loc = {float(t): localization_accuracy(records, t) for t in taus}
    auroc_by_class = dict(auroc_by_class or {})
    macro = float(np.mean(list(auroc_by_class.values()))) if auroc_by_class else None
    return MetricsReport(
        class_names=list(class_names),
        counts=counts,
        point=point,
        localization=loc,
        auroc=auroc_by_class,
        weighted_point=weighted_average(point, counts),
        weighted_localization={t: weighted_average(v, counts) for t, v in loc.items()},
        macro_auroc=macro,
        notes=notes,
        records=records,
    )


def auroc_per_class(scores: np.ndarray, labels: np.ndarray, notes: Optional[List[str]] = None) -> Dict[int, float]:
    out = {}
    for c in range(labels.shape[1]):
        try:
            out[c] = auroc(scores[:, c], labels[:, c])
        except UndefinedMetricError:
            if notes is not None:
                notes.append(f"AUROC undefined for class {c}: single-class labels")
    return out
