"""Run a trained model over an annotated dataset and score its CAMs."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor_ops as T
from .data import ArrayDataset
from .metrics import GtInstance, MetricsReport, aggregate, auroc_per_class, evaluate_instance
from .models import CAMNet
from .training import predict


def upsample_heatmaps(heatmaps: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (n, k, h, w) heatmaps to the input resolution."""
    with T.no_grad():
        return T.bilinear_upsample(T.Tensor(heatmaps), size=(size, size)).data


def gt_instances(data: ArrayDataset):
    for i, boxes in enumerate(data.boxes):
        for c in sorted(boxes):
            if boxes[c]:
                yield i, GtInstance(data.ids[i], c, list(boxes[c]))


def evaluate_model(model: CAMNet, data: ArrayDataset, taus: Sequence[float] = (0.25, 0.5),
                   batch_size: int = 100) -> MetricsReport:
    logits, heat = predict(model, data.images.astype(model.dtype), batch_size)
    return score_predictions(logits, heat, data, taus, batch_size)


def score_predictions(logits: np.ndarray, heat: np.ndarray, data: ArrayDataset,
                      taus: Sequence[float] = (0.25, 0.5), batch_size: int = 100) -> MetricsReport:
    """Metrics for precomputed (logits, heatmaps); CAMs are upsampled to the image size."""
    size = data.images.shape[-1]
    records = []
    for start in range(0, len(data), batch_size):
        cams = upsample_heatmaps(heat[start : start + batch_size], size)
        for i in range(start, min(start + batch_size, len(data))):
            for c in sorted(data.boxes[i]):
                if data.boxes[i][c]:
                    gt = GtInstance(data.ids[i], c, list(data.boxes[i][c]))
                    records.append(evaluate_instance(cams[i - start, c], gt, taus))
    notes = []
    aurocs = auroc_per_class(logits, data.labels, notes)
    report = aggregate(records, data.class_names, taus, aurocs)
    report.notes.extend(notes)
    return report
