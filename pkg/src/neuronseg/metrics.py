"""Detection and segmentation scores: det-F1, seg-F1, Dice and relative count error."""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from .labelsynth import PointAnnotations
from .raster import check_same_shape


@dataclasses.dataclass(frozen=True)
class EvalCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")


@dataclasses.dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def precision_recall_f1(counts: EvalCounts) -> PRF:
    """P = TP/(TP+FP), R = TP/(TP+FN), F = 2PR/(P+R).

    With nothing predicted and nothing expected every score is 1; a zero
    denominator otherwise gives 0.  F is computed as ``2TP / (2TP + FP + FN)``,
    the same quantity with a single rounding.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == fp == fn == 0:
        return PRF(1.0, 1.0, 1.0)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return PRF(p, r, f)


def match_detections(pred: np.ndarray, centroids: PointAnnotations) -> EvalCounts:
    """Centroid rule: a predicted instance is a hit iff it holds exactly one centroid.

    Instances holding zero or several centroids are false positives; every
    centroid not inside a hit instance is a false negative.  Containment is
    tested at the centroid pixel.
    """
    pred = np.asarray(pred)
    centroids.check_bounds(pred.shape)
    pred_ids = np.unique(pred)
    pred_ids = pred_ids[pred_ids > 0]
    hit = pred[centroids.ys, centroids.xs]
    inside = hit[hit > 0]
    ids, per_instance = np.unique(inside, return_counts=True)
    tp = int((per_instance == 1).sum())
    return EvalCounts(tp=tp, fp=len(pred_ids) - tp, fn=len(centroids) - tp)


def _overlaps(pred: np.ndarray, gt: np.ndarray):
    """Per-id areas and the intersection size of every overlapping (pred, gt) pair."""
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    p_ids, p_area = np.unique(p[p > 0], return_counts=True)
    g_ids, g_area = np.unique(g[g > 0], return_counts=True)
    both = (p > 0) & (g > 0)
    pairs, inter = np.unique(np.stack([p[both], g[both]], axis=1), axis=0, return_counts=True)
    if len(pairs) == 0:
        pairs = np.zeros((0, 2), dtype=np.int64)
    return (p_ids, p_area), (g_ids, g_area), pairs, inter


def pairwise_iou(pred: np.ndarray, gt: np.ndarray):
    """``(pred_id, gt_id, iou)`` arrays over every overlapping pair."""
    check_same_shape(pred, gt)
    (p_ids, p_area), (g_ids, g_area), pairs, inter = _overlaps(np.asarray(pred), np.asarray(gt))
    pa = p_area[np.searchsorted(p_ids, pairs[:, 0])]
    ga = g_area[np.searchsorted(g_ids, pairs[:, 1])]
    return pairs[:, 0], pairs[:, 1], inter / (pa + ga - inter)


def match_instances_iou(pred: np.ndarray, gt: np.ndarray, iou_thresh: float = 0.5) -> EvalCounts:
    """Instances match when IoU is strictly greater than ``iou_thresh``.

    For thresholds >= 0.5 this is necessarily one-to-one.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    pid, gid, iou = pairwise_iou(pred, gt)
    ok = iou > iou_thresh
    n_pred = len(np.unique(pred[pred > 0]))
    n_gt = len(np.unique(gt[gt > 0]))
    tp_pred = len(np.unique(pid[ok]))
    tp_gt = len(np.unique(gid[ok]))
    tp = min(tp_pred, tp_gt)
    return EvalCounts(tp=tp, fp=n_pred - tp_pred, fn=n_gt - tp_gt)


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    check_same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def rce(n_detected: int, n_expert: int) -> float:
    """Relative count error ``|N_a - N_e| / N_e``."""
    if n_expert < 1:
        raise ValueError("relative count error needs at least one expert count")
    return abs(n_detected - n_expert) / n_expert


def best_overlap_iou(pred: np.ndarray, gt: np.ndarray) -> dict[int, float]:
    """IoU of each predicted instance with the GT instance it overlaps most (0 if none)."""
    pred = np.asarray(pred)
    ids = np.unique(pred[pred > 0])
    out = {int(i): 0.0 for i in ids}
    (p_ids, p_area), (g_ids, g_area), pairs, inter = _overlaps(pred, np.asarray(gt))
    best_inter: dict[int, int] = {}
    for (p, g), n in zip(pairs.tolist(), inter.tolist()):
        if n > best_inter.get(p, 0):
            best_inter[p] = n
            union = p_area[np.searchsorted(p_ids, p)] + g_area[np.searchsorted(g_ids, g)] - n
            out[p] = n / union
    return out


@dataclasses.dataclass
class EvalReport:
    det: PRF
    seg: PRF
    det_counts: EvalCounts
    seg_counts: EvalCounts
    dice: float
    rce: float
    n_detected: int
    n_expert: int
    name: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "det": dataclasses.asdict(self.det),
            "seg": dataclasses.asdict(self.seg),
            "det_counts": dataclasses.asdict(self.det_counts),
            "seg_counts": dataclasses.asdict(self.seg_counts),
            "det_f1": self.det.f1,
            "seg_f1": self.seg.f1,
            "dice": self.dice,
            "rce": self.rce,
            "n_detected": self.n_detected,
            "n_expert": self.n_expert,
        }


def evaluate(
    pred: np.ndarray,
    gt: np.ndarray,
    centroids: PointAnnotations,
    iou_thresh: float = 0.5,
    name: str = "",
) -> EvalReport:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    det_counts = match_detections(pred, centroids)
    seg_counts = match_instances_iou(pred, gt, iou_thresh)
    n_detected = len(np.unique(pred[pred > 0]))
    return EvalReport(
        det=precision_recall_f1(det_counts),
        seg=precision_recall_f1(seg_counts),
        det_counts=det_counts,
        seg_counts=seg_counts,
        dice=dice(pred > 0, gt > 0),
        rce=rce(n_detected, len(centroids)),
        n_detected=n_detected,
        n_expert=len(centroids),
        name=name,
    )


def summarize(reports: Sequence[EvalReport]) -> dict:
    """Mean of each table column over images."""
    if not reports:
        return {}
    return {
        key: float(np.mean([r.to_dict()[key] for r in reports]))
        for key in ("det_f1", "seg_f1", "dice", "rce")
    }


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table with det-F1 / seg-F1 / Dice / RCE columns, plus a mean row."""
    name_w = max([len("image"), len("mean")] + [len(r.name) for r in reports])
    lines = [f"{'image':<{name_w}}  {'det-F1':>7}  {'seg-F1':>7}  {'Dice':>7}  {'RCE':>7}"]
    for r in reports:
        lines.append(f"{r.name:<{name_w}}  {r.det.f1:7.3f}  {r.seg.f1:7.3f}  {r.dice:7.3f}  {r.rce:7.3f}")
    if reports:
        m = summarize(reports)
        lines.append(
            f"{'mean':<{name_w}}  {m['det_f1']:7.3f}  {m['seg_f1']:7.3f}  {m['dice']:7.3f}  {m['rce']:7.3f}"
        )
    return "\n".join(lines) + "\n"


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps(
        {"images": [r.to_dict() for r in reports], "mean": summarize(reports)},
        indent=2,
        sort_keys=True,
    )


def det_f1_csv(reports: Sequence[EvalReport]) -> str:
    """Per-image det-F1 values for external box plots."""
    return "image,det_f1\n" + "".join(f"{r.name},{r.det.f1!r}\n" for r in reports)
