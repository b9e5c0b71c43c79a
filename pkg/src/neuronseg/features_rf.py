"""Per-pixel colour features and a small random-forest pixel classifier.

Features are four 8-bit planes per pixel: H, S, V and the local mean gray
intensity.  The forest is a plain Breiman forest (bootstrap resamples, random
feature subset per split, Gini impurity) grown over those 8-bit values, which
lets split search work on 256-bin class histograms.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from pathlib import Path

import numba
import numpy as np

from .raster import DimensionError, rgb_to_hsv

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("h", "s", "v", "local_intensity")
N_FEATURES = len(FEATURE_NAMES)
MODEL_FORMAT = "neuronseg.forest"
MODEL_VERSION = 1


class TrainingError(ValueError):
    pass


def local_mean_intensity(image: np.ndarray, window_radius: int) -> np.ndarray:
    """Rounded mean of ``(R+G+B)/3`` over a ``(2r+1)^2`` window, edges replicated."""
    if window_radius < 0:
        raise ValueError("window_radius must be >= 0")
    r = int(window_radius)
    s = np.asarray(image)[..., :3].astype(np.int64).sum(axis=2)
    padded = np.pad(s, r, mode="edge")
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    k = 2 * r + 1
    h, w = s.shape
    total = (
        integral[k : k + h, k : k + w]
        - integral[0:h, k : k + w]
        - integral[k : k + h, 0:w]
        + integral[0:h, 0:w]
    )
    denom = 3 * k * k
    return ((2 * total + denom) // (2 * denom)).astype(np.uint8)


def extract_pixel_features(image: np.ndarray, window_radius: int = 5) -> np.ndarray:
    """Return ``(H, W, 4)`` uint8 planes ``h, s, v, local_intensity``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) RGB image, got shape {image.shape}")
    hsv = rgb_to_hsv(image)
    li = local_mean_intensity(image, window_radius)
    return np.concatenate([hsv, li[..., None]], axis=2)


@dataclasses.dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 5
    features_per_split: int = 2
    bootstrap: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_leaf >= 1")
        if not 1 <= self.features_per_split <= N_FEATURES:
            raise ValueError(f"features_per_split must be in [1, {N_FEATURES}]")


@dataclasses.dataclass
class Tree:
    """Flattened binary tree.  Node 0 is the root; ``feature == -1`` marks a leaf.

    A sample goes left when ``x[feature] <= threshold``.
    """

    feature: np.ndarray  # int64
    threshold: np.ndarray  # float64, midpoints between 8-bit values
    left: np.ndarray  # int64
    right: np.ndarray  # int64
    counts: np.ndarray  # (n_nodes, 2) int64 class counts, leaves only meaningful

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Foreground fraction of the training samples in each sample's leaf."""
        c = self.counts[self.leaf_index(X)]
        return c[:, 1] / c.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            counts=np.asarray(d["counts"], dtype=np.int64).reshape(-1, 2),
        )


def _gini_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best threshold on one 8-bit feature.  Returns (impurity, threshold) or None."""
    n = len(y)
    pos = np.bincount(x, weights=y, minlength=256)
    tot = np.bincount(x, minlength=256).astype(np.float64)
    present = np.flatnonzero(tot)
    if len(present) < 2:
        return None
    n_left = np.cumsum(tot[present])[:-1]
    p_left = np.cumsum(pos[present])[:-1]
    n_right = n - n_left
    p_right = pos.sum() - p_left
    ok = (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    gl = 1.0 - (p_left / n_left) ** 2 - (1.0 - p_left / n_left) ** 2
    gr = 1.0 - (p_right / n_right) ** 2 - (1.0 - p_right / n_right) ** 2
    impurity = (n_left * gl + n_right * gr) / n
    impurity = np.where(ok, impurity, np.inf)
    k = int(np.argmin(impurity))
    return float(impurity[k]), (present[k] + present[k + 1]) / 2.0


def _grow_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n1 = int(y[idx].sum())
        counts.append((len(idx) - n1, n1))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        n0, n1 = counts[node]
        if depth >= params.max_depth or n0 == 0 or n1 == 0 or len(idx) < 2 * params.min_leaf:
            continue
        parent_gini = 1.0 - (n0 / len(idx)) ** 2 - (n1 / len(idx)) ** 2
        best = None
        for f in rng.permutation(N_FEATURES)[: params.features_per_split]:
            found = _gini_split(X[idx, f], y[idx], params.min_leaf)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], found[1], int(f))
        if best is None or best[0] >= parent_gini:
            continue
        _, thr, f = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        counts=np.asarray(counts, dtype=np.int64).reshape(-1, 2),
    )


@numba.njit(cache=True)
def _vote_kernel(X, feature, threshold, left, right, votes_fg, offsets):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        total = 0
        for t in range(n_trees):
            node = offsets[t]
            base = offsets[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            total += votes_fg[node]
        out[i] = total
    return out


class ForestModel:
    """An ensemble of :class:`Tree` voting foreground/background."""

    def __init__(self, trees: list[Tree], params: ForestParams):
        self.trees = list(trees)
        self.params = params
        self._packed = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _pack(self):
        if self._packed is None:
            sizes = [t.n_nodes for t in self.trees]
            offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
            feature = np.concatenate([t.feature for t in self.trees])
            counts = np.concatenate([t.counts for t in self.trees])
            # a tree votes foreground when its leaf fraction is >= 0.5
            votes = (counts[:, 1] >= counts[:, 0]).astype(np.int64)
            self._packed = (
                feature,
                np.concatenate([t.threshold for t in self.trees]),
                np.concatenate([t.left for t in self.trees]),
                np.concatenate([t.right for t in self.trees]),
                votes,
                offsets,
            )
        return self._packed

    def vote_counts(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.uint8)
        if X.ndim != 2 or X.shape[1] != N_FEATURES:
            raise DimensionError(f"expected (n, {N_FEATURES}) features, got {X.shape}")
        return _vote_kernel(X, *self._pack())

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Fraction of trees voting foreground for each row of ``X``."""
        return self.vote_counts(X) / self.n_trees

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(FEATURE_NAMES),
            "n_trees": self.n_trees,
            "params": dataclasses.asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not a neuronseg forest model (format/version mismatch)")
        trees = [Tree.from_dict(t) for t in d["trees"]]
        if len(trees) != d["n_trees"] or not trees:
            raise ValueError("model n_trees does not match stored trees")
        return cls(trees, ForestParams(**d["params"]))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_random_forest(X: np.ndarray, y: np.ndarray, params: ForestParams | None = None) -> ForestModel:
    """Fit a binary random forest on ``(n, 4)`` uint8 features.

    Tree ``t`` draws its bootstrap sample and split features from a generator
    seeded with ``(seed, t)``, so a model is fully determined by the sample
    order and the seed.
    """
    params = params or ForestParams()
    params.validate()
    X = np.asarray(X)
    y = np.asarray(y).astype(np.int64).ravel()
    if X.ndim != 2 or X.shape[1] != N_FEATURES or len(X) != len(y):
        raise DimensionError(f"expected (n, {N_FEATURES}) features with n labels")
    if np.any((y != 0) & (y != 1)):
        raise TrainingError("labels must be 0 or 1")
    if X.min(initial=0) < 0 or X.max(initial=0) > 255:
        raise TrainingError("features must be 8-bit values")
    if len(np.unique(y)) < 2:
        raise TrainingError("training data must contain both classes")
    X = X.astype(np.int64)

    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng([params.seed, t])
        if params.bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
        else:
            idx = np.arange(len(y))
        trees.append(_grow_tree(X[idx], y[idx], params, rng))
    logger.debug("trained %d trees, %d nodes total", len(trees), sum(t.n_nodes for t in trees))
    return ForestModel(trees, params)


def predict_semantic(model: ForestModel, features: np.ndarray, threshold: float = 0.5):
    """Classify every pixel of ``(H, W, 4)`` feature planes.

    Returns ``(mask, probability)``; ``mask = probability >= threshold``.
    """
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[2] != N_FEATURES:
        raise DimensionError(f"expected (H, W, {N_FEATURES}) feature planes, got {features.shape}")
    h, w, _ = features.shape
    prob = model.predict_proba(features.reshape(-1, N_FEATURES)).reshape(h, w)
    return prob >= threshold, prob


def sample_training_pixels(
    features: np.ndarray, truth: np.ndarray, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw up to ``n`` pixels, half from each class where possible."""
    flat_f = features.reshape(-1, N_FEATURES)
    flat_t = np.asarray(truth, dtype=bool).ravel()
    picks = []
    for cls in (False, True):
        idx = np.flatnonzero(flat_t == cls)
        k = min(len(idx), n // 2)
        picks.append(np.sort(rng.choice(idx, size=k, replace=False)) if k else idx[:0])
    idx = np.concatenate(picks)
    return flat_f[idx], flat_t[idx].astype(np.int64)


def write_samples_csv(path: str | os.PathLike, X: np.ndarray, y: np.ndarray) -> None:
    lines = [",".join(FEATURE_NAMES) + ",label"]
    lines += [",".join(str(int(v)) for v in row) + f",{int(lab)}" for row, lab in zip(X, y)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_samples_csv(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != list(FEATURE_NAMES) + ["label"]:
            raise ValueError(f"{path}: expected header {','.join(FEATURE_NAMES)},label")
        data = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
    return data[:, :N_FEATURES].astype(np.uint8), data[:, N_FEATURES]
