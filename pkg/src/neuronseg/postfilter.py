"""Predicted-IoU filtering of instance candidates.

A least-squares gradient-boosted tree ensemble regresses each candidate's
IoU with the ground truth from a handful of shape and probability features;
candidates whose predicted IoU falls below a threshold (0.3 by default) are
dropped.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from pathlib import Path

import numpy as np

from .instance import CandidateSet, ClassProbMaps
from .metrics import best_overlap_iou
from .raster import check_same_shape, neighbor_offsets

FEATURE_NAMES = (
    "area",
    "perimeter",
    "circularity",
    "mean_interior",
    "mean_contour",
    "contact_ratio",
    "bbox_fill",
)
MAX_CIRCULARITY = 1.2
MODEL_FORMAT = "neuronseg.gbt"
MODEL_VERSION = 1
DEFAULT_THRESHOLD = 0.3


# --------------------------------------------------------------------------
# features


def extract_candidate_features(cands: CandidateSet, maps: ClassProbMaps) -> np.ndarray:
    """One row per candidate (in ``cands.records`` order), columns :data:`FEATURE_NAMES`.

    Perimeter counts the candidate's boundary pixels, i.e. pixels with at
    least one 8-neighbour outside the candidate (an 11x11 square has
    perimeter 40).  Circularity ``4*pi*A/P^2`` is capped at 1.2 because tiny
    digital shapes overshoot 1.  ``contact_ratio`` is the fraction of
    boundary pixels that touch another candidate.
    """
    labels = cands.labels
    check_same_shape(labels, maps.interior)
    ids = np.asarray(cands.ids, dtype=np.int64)
    out = np.zeros((len(ids), len(FEATURE_NAMES)))
    if not len(ids):
        return out

    h, w = labels.shape
    padded = np.pad(labels, 1, constant_values=0)
    boundary = np.zeros((h, w), dtype=bool)
    contact = np.zeros((h, w), dtype=bool)
    for dy, dx in neighbor_offsets(8):
        nb = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        differs = nb != labels
        boundary |= differs
        contact |= differs & (nb > 0)
    fg = labels > 0
    boundary &= fg
    contact &= fg

    lut = np.zeros(int(labels.max()) + 1, dtype=np.int64)
    lut[:] = len(ids)  # ids not in the record list go to a spill bin
    lut[ids] = np.arange(len(ids))
    dense = lut[labels[fg]]
    n = len(ids) + 1

    def per_id(weights=None):
        return np.bincount(dense, weights=weights, minlength=n)[: len(ids)]

    area = per_id()
    perim = per_id(boundary[fg].astype(np.float64))
    touching = per_id(contact[fg].astype(np.float64))
    mean_int = per_id(maps.interior[fg]) / area
    mean_con = per_id(maps.contour[fg]) / area
    bbox_area = np.array([(r.bbox[2] - r.bbox[0]) * (r.bbox[3] - r.bbox[1]) for r in cands.records])

    safe_perim = np.maximum(perim, 1)
    out[:, 0] = area
    out[:, 1] = perim
    out[:, 2] = np.minimum(4 * math.pi * area / safe_perim**2, MAX_CIRCULARITY)
    out[:, 3] = mean_int
    out[:, 4] = mean_con
    out[:, 5] = touching / safe_perim
    out[:, 6] = area / bbox_area
    return out


def true_iou_targets(cands: CandidateSet, gt: np.ndarray) -> np.ndarray:
    """IoU of each candidate with the GT instance it overlaps most (0 if none)."""
    best = best_overlap_iou(cands.labels, gt)
    return np.array([best.get(i, 0.0) for i in cands.ids])


# --------------------------------------------------------------------------
# boosted regression trees


@dataclasses.dataclass(frozen=True)
class GbtParams:
    n_rounds: int = 100
    depth: int = 3
    shrinkage: float = 0.1
    min_leaf: int = 1
    seed: int = 0


@dataclasses.dataclass
class RegressionTree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(len(self.feature)):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            idx = np.flatnonzero(internal)
            n = node[idx]
            go_left = X[idx, f[idx]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
        return self.value[node]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int):
    """Largest squared-error reduction over all features and midpoint thresholds."""
    n = len(r)
    total = r.sum()
    best = (1e-12, -1, 0.0)
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cs = np.cumsum(r[order])[:-1]
        n_left = np.arange(1, n)
        valid = (xs[1:] != xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        gain = cs**2 / n_left + (total - cs) ** 2 / (n - n_left) - total**2 / n
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best[0]:
            best = (float(gain[k]), f, (xs[k] + xs[k + 1]) / 2.0)
    return best


def fit_regression_tree(X: np.ndarray, r: np.ndarray, depth: int, min_leaf: int = 1) -> RegressionTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def build(idx: np.ndarray, d: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[idx].mean()))
        if d < depth and len(idx) >= 2 * min_leaf:
            gain, f, thr = _best_split(X[idx], r[idx], min_leaf)
            if f >= 0:
                go_left = X[idx, f] <= thr
                feature[node], threshold[node] = f, thr
                left[node] = build(idx[go_left], d + 1)
                right[node] = build(idx[~go_left], d + 1)
        return node

    build(np.arange(len(r)), 0)
    return RegressionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )


class GbtModel:
    def __init__(self, base: float, trees: list[RegressionTree], params: GbtParams, train_mse: list[float] | None = None):
        self.base = float(base)
        self.trees = list(trees)
        self.params = params
        self.train_mse = list(train_mse or [])

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def raw_predict(self, X: np.ndarray, n_rounds: int | None = None) -> np.ndarray:
        """Unclamped ensemble output using the first ``n_rounds`` trees."""
        X = np.asarray(X, dtype=np.float64)
        out = np.full(len(X), self.base)
        for tree in self.trees[:n_rounds]:
            out += self.params.shrinkage * tree.predict(X)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Predicted IoU, clamped to [0, 1]."""
        return np.clip(self.raw_predict(X), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(FEATURE_NAMES),
            "params": dataclasses.asdict(self.params),
            "base_prediction": self.base,
            "trees": [t.to_dict() for t in self.trees],
            "train_mse": self.train_mse,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not a neuronseg GBT model (format/version mismatch)")
        return cls(
            d["base_prediction"],
            [RegressionTree.from_dict(t) for t in d["trees"]],
            GbtParams(**d["params"]),
            d.get("train_mse"),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GbtModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_iou_regressor(X: np.ndarray, y: np.ndarray, params: GbtParams | None = None) -> GbtModel:
    """Least-squares boosting: start from the mean target, fit each round's tree to the residuals."""
    params = params or GbtParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) == 0:
        raise ValueError("cannot train on an empty table")
    if len(y) < 2 or X.shape[0] != len(y):
        raise ValueError("need at least two samples with one feature row each")
    if (y < 0).any() or (y > 1).any():
        raise ValueError("IoU targets must lie in [0, 1]")
    base = float(y.mean())
    pred = np.full(len(y), base)
    trees = []
    mse = [float(np.mean((y - pred) ** 2))]
    for _ in range(params.n_rounds):
        tree = fit_regression_tree(X, y - pred, params.depth, params.min_leaf)
        pred = pred + params.shrinkage * tree.predict(X)
        trees.append(tree)
        mse.append(float(np.mean((y - pred) ** 2)))
    return GbtModel(base, trees, params, mse)


# --------------------------------------------------------------------------
# filtering


def filter_by_scores(cands: CandidateSet, scores: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> CandidateSet:
    """Keep candidates with ``score >= threshold``; removed ids are zeroed in the map."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = scores >= threshold
    kept_ids = np.asarray([r.id for r, k in zip(cands.records, keep) if k], dtype=np.int64)
    labels = np.where(np.isin(cands.labels, kept_ids), cands.labels, 0).astype(cands.labels.dtype)
    records = [dataclasses.replace(r, score=float(s)) for r, s, k in zip(cands.records, scores, keep) if k]
    return CandidateSet(labels, records)


def filter_candidates(
    cands: CandidateSet, model: GbtModel, maps: ClassProbMaps, threshold: float = DEFAULT_THRESHOLD
) -> CandidateSet:
    """Score unscored candidates with ``model`` and keep those at or above ``threshold``.

    A candidate's score is its predicted IoU in the context it was first
    seen in; records that already carry a score keep it, so filtering an
    already-filtered set again changes nothing.
    """
    scores = np.array([np.nan if r.score is None else r.score for r in cands.records])
    fresh = np.isnan(scores)
    if fresh.any():
        scores[fresh] = model.predict(extract_candidate_features(cands, maps))[fresh]
    return filter_by_scores(cands, scores, threshold)


def write_training_table(path: str | os.PathLike, X: np.ndarray, y: np.ndarray) -> None:
    lines = [",".join(FEATURE_NAMES) + ",iou"]
    lines += [",".join(repr(float(v)) for v in row) + f",{float(t)!r}" for row, t in zip(X, y)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_training_table(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != list(FEATURE_NAMES) + ["iou"]:
            raise ValueError(f"{path}: unexpected header {header}")
        data = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
    return data[:, :-1], data[:, -1]
