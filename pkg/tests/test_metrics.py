import numpy as np
import pytest

import oracles
from neuronseg.labelsynth import PointAnnotations
from neuronseg.metrics import (
    EvalCounts,
    best_overlap_iou,
    det_f1_csv,
    dice,
    evaluate,
    format_table,
    match_detections,
    match_instances_iou,
    pairwise_iou,
    precision_recall_f1,
    rce,
    reports_to_json,
)


def centroids_of(lab):
    """One point per instance at a pixel it owns (first in raster order after its median)."""
    ids, xs, ys = [], [], []
    for k in np.unique(lab[lab > 0]):
        yy, xx = np.nonzero(lab == k)
        i = len(yy) // 2
        ids.append(int(k))
        xs.append(int(xx[i]))
        ys.append(int(yy[i]))
    return PointAnnotations(ids, xs, ys)


def as_tuples(p):
    return list(zip(p.ids.tolist(), p.xs.tolist(), p.ys.tolist()))


def test_prf_examples():
    assert precision_recall_f1(EvalCounts(8, 2, 2)).f1 == pytest.approx(0.8)
    r = precision_recall_f1(EvalCounts(0, 0, 0))
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)
    r = precision_recall_f1(EvalCounts(0, 5, 5))
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        EvalCounts(-1, 0, 0)


def test_rce_examples():
    assert rce(100, 100) == 0
    assert rce(120, 100) == pytest.approx(0.2)
    assert rce(96, 100) == pytest.approx(0.04)
    with pytest.raises(ValueError):
        rce(3, 0)


def test_one_instance_one_centroid():
    lab = np.zeros((10, 10), np.uint32)
    lab[2:6, 2:6] = 1
    c = EvalCounts(1, 0, 0)
    assert match_detections(lab, PointAnnotations([1], [3], [3])) == c


def test_instance_with_two_centroids_is_a_miss():
    lab = np.zeros((10, 10), np.uint32)
    lab[2:8, 2:8] = 1
    assert match_detections(lab, PointAnnotations([1, 2], [3, 6], [3, 6])) == EvalCounts(0, 1, 2)


def test_identical_maps_match_fully():
    lab = oracles.random_instance_map(np.random.default_rng(0), 48, 48, 6)
    n = len(np.unique(lab[lab > 0]))
    assert match_instances_iou(lab, lab) == EvalCounts(n, 0, 0)


def test_shifted_prediction_matches_nothing():
    gt = np.zeros((30, 30), np.uint32)
    gt[5:11, 5:11] = 1
    pred = np.roll(gt, 4, axis=1)
    assert match_instances_iou(pred, gt).tp == 0


def test_dice_examples():
    a = np.zeros((5, 5), bool)
    assert dice(a, a) == 1.0
    b = a.copy()
    b[0] = True
    assert dice(b, b) == 1.0
    c = a.copy()
    c[4] = True
    assert dice(b, c) == 0.0


@pytest.mark.parametrize("seed", range(40))
def test_metrics_agree_with_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(8, 65, 2)
    gt = oracles.random_instance_map(rng, h, w, rng.integers(0, 11))
    pred = oracles.random_instance_map(rng, h, w, rng.integers(0, 11))
    cents = centroids_of(gt)
    det = match_detections(pred, cents)
    assert (det.tp, det.fp, det.fn) == oracles.detection_counts(pred, as_tuples(cents))
    seg = match_instances_iou(pred, gt)
    assert (seg.tp, seg.fp, seg.fn) == oracles.iou_counts(pred, gt)
    assert dice(pred > 0, gt > 0) == oracles.dice_count(pred > 0, gt > 0)
    assert dice(gt > 0, pred > 0) == dice(pred > 0, gt > 0)
    p = precision_recall_f1(seg)
    assert (p.precision, p.recall, p.f1) == oracles.prf(seg.tp, seg.fp, seg.fn)
    if p.precision + p.recall > 0:
        assert min(p.precision, p.recall) <= p.f1 + 1e-12 <= max(p.precision, p.recall) + 2e-12


@pytest.mark.parametrize("seed", range(10))
def test_iou_matching_is_one_to_one(seed):
    rng = np.random.default_rng(100 + seed)
    gt = oracles.random_instance_map(rng, 64, 64, 10)
    pred = oracles.random_instance_map(rng, 64, 64, 10)
    pid, gid, iou = pairwise_iou(pred, gt)
    ok = iou > 0.5
    assert len(set(pid[ok])) == ok.sum() and len(set(gid[ok])) == ok.sum()


def test_best_overlap_iou():
    gt = np.zeros((10, 10), np.uint32)
    gt[0:4, 0:4] = 1
    pred = np.zeros_like(gt)
    pred[0:4, 0:2] = 5
    pred[8:10, 8:10] = 6
    assert best_overlap_iou(pred, gt) == {5: 0.5, 6: 0.0}


def test_report_outputs():
    lab = oracles.random_instance_map(np.random.default_rng(3), 40, 40, 5)
    rep = evaluate(lab, lab, centroids_of(lab), name="a")
    assert (rep.det.f1, rep.seg.f1, rep.dice, rep.rce) == (1.0, 1.0, 1.0, 0.0)
    table = format_table([rep])
    assert table.splitlines()[0].split() == ["image", "det-F1", "seg-F1", "Dice", "RCE"]
    assert table.splitlines()[-1].startswith("mean")
    assert '"det_f1": 1.0' in reports_to_json([rep])
    assert det_f1_csv([rep]) == "image,det_f1\na,1.0\n"
