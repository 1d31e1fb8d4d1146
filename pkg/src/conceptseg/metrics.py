"""Segmentation, concept and video-tracking metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .inference import IGNORE_ID

HIST_BINS = np.linspace(0.0, 1.0, 11)


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int,
                     ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Rows are ground truth, columns prediction; ignored pixels are dropped."""
    gt = np.asarray(gt).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if gt.shape != pred.shape:
        raise ValueError("prediction and ground truth differ in shape")
    keep = gt != ignore_id
    gt, pred = gt[keep], pred[keep]
    if len(gt) and (gt.max() >= num_classes or pred.max() >= num_classes or pred.min() < 0):
        raise ValueError("class id outside the vocabulary")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[dict[int, float], float]:
    """Per-class IoU for classes present in GT or prediction, and their mean."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = {c: float(tp[c] / denom[c]) for c in range(len(tp)) if denom[c] > 0}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def miou(predictions, ground_truths, num_classes: int, ignore_id: int = IGNORE_ID
         ) -> tuple[dict[int, float], float]:
    """Accumulated over all image pairs before computing IoU."""
    if isinstance(predictions, np.ndarray) and predictions.ndim == 2:
        predictions, ground_truths = [predictions], [ground_truths]
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(predictions, ground_truths, strict=True):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")
        cm += confusion_matrix(g, p, num_classes, ignore_id)
    return iou_from_confusion(cm)


@dataclass
class PurityReport:
    purity: dict[int, float]
    counts: dict[int, int]
    histogram: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.purity.values()))) if self.purity else float("nan")

    def fraction_above(self, threshold: float) -> float:
        vals = list(self.purity.values())
        return float(np.mean([v > threshold for v in vals])) if vals else float("nan")

    def to_json(self) -> dict:
        return {"purity": {str(k): v for k, v in self.purity.items()},
                "counts": {str(k): v for k, v in self.counts.items()},
                "histogram": self.histogram, "bins": HIST_BINS.tolist(),
                "mean": self.mean, "fraction_above_0.8": self.fraction_above(0.8)}


def purity(concept_ids, segment_classes) -> PurityReport:
    """Share of each concept's segments that carry its majority class.

    Segments with class < 0 (no usable ground truth) are dropped.
    """
    concept_ids = np.asarray(concept_ids, dtype=np.int64)
    segment_classes = np.asarray(segment_classes, dtype=np.int64)
    keep = segment_classes >= 0
    concept_ids, segment_classes = concept_ids[keep], segment_classes[keep]
    out, counts = {}, {}
    for c in np.unique(concept_ids).tolist():
        cls = segment_classes[concept_ids == c]
        out[c] = float(np.bincount(cls).max() / len(cls))
        counts[c] = int(len(cls))
    hist, _ = np.histogram(list(out.values()), bins=HIST_BINS)
    return PurityReport(out, counts, hist.tolist())


# --- video metrics -----------------------------------------------------------------------------

def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (image border does not count)."""
    m = np.asarray(mask, dtype=bool)
    b = np.zeros_like(m)
    b[:-1] |= m[:-1] & ~m[1:]
    b[1:] |= m[1:] & ~m[:-1]
    b[:, :-1] |= m[:, :-1] & ~m[:, 1:]
    b[:, 1:] |= m[:, 1:] & ~m[:, :-1]
    return b


def default_tolerance(shape: tuple[int, int]) -> int:
    return math.ceil(0.008 * math.hypot(*shape))


def boundary_matches(pred_b: np.ndarray, gt_b: np.ndarray, tol: float) -> int:
    """Size of a maximum one-to-one matching of boundary pixels within distance ``tol``."""
    p = np.argwhere(pred_b)
    g = np.argwhere(gt_b)
    if len(p) == 0 or len(g) == 0:
        return 0
    pairs = cKDTree(p).query_ball_tree(cKDTree(g), r=tol + 1e-9)
    rows = np.repeat(np.arange(len(p)), [len(x) for x in pairs])
    cols = np.fromiter((j for x in pairs for j in x), dtype=np.int64, count=len(rows))
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(p), len(g)))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int((match >= 0).sum())


def f_measure(pred: np.ndarray, gt: np.ndarray, tol: float | None = None) -> float:
    tol = default_tolerance(np.shape(gt)) if tol is None else tol
    pb, gb = boundary(pred), boundary(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    m = boundary_matches(pb, gb, tol)
    precision, recall = m / pb.sum(), m / gb.sum()
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    union = (pred | gt).sum()
    return 1.0 if union == 0 else float((pred & gt).sum() / union)


def j_f_scores(predicted, ground_truth, object_ids=None, tol: float | None = None) -> dict:
    """J and F per object averaged over frames, then over objects.

    ``predicted`` and ``ground_truth`` are per-frame label images with 0 as
    background and object ids elsewhere.
    """
    if len(predicted) != len(ground_truth):
        raise ValueError(f"{len(predicted)} predicted frames vs {len(ground_truth)} GT frames")
    if object_ids is None:
        object_ids = sorted(set(np.unique(np.stack(ground_truth)).tolist()) - {0})
    per_object = {}
    for obj in object_ids:
        js = [jaccard(p == obj, g == obj) for p, g in zip(predicted, ground_truth)]
        fs = [f_measure(p == obj, g == obj, tol) for p, g in zip(predicted, ground_truth)]
        per_object[int(obj)] = {"J": float(np.mean(js)), "F": float(np.mean(fs))}
    j_mean = float(np.mean([v["J"] for v in per_object.values()])) if per_object else float("nan")
    f_mean = float(np.mean([v["F"] for v in per_object.values()])) if per_object else float("nan")
    return {"J_mean": j_mean, "F_mean": f_mean, "per_object": per_object}
