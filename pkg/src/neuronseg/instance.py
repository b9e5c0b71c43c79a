"""From class probabilities to cell instances, plus a classical baseline segmenter.

The baseline stands in for a trained network: a random-forest foreground
mask, one marker per distance-transform peak, and competitive region growing
from those markers.  Its output can be re-expressed as background / interior
/ contour probability maps so that tiles can be stitched and fused exactly
like network predictions.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np
from scipy import ndimage

from .features_rf import ForestModel, extract_pixel_features, predict_semantic
from .labelsynth import GrowConfig, competitive_region_growing, interface_band
from .raster import (
    LABEL_DTYPE,
    DimensionError,
    check_same_shape,
    connected_components,
    distance_transform,
    opening,
)


@dataclasses.dataclass
class ClassProbMaps:
    background: np.ndarray
    interior: np.ndarray
    contour: np.ndarray
    normalized: bool = True  # per-pixel sum is 1 (within 1e-3)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        self.interior = np.asarray(self.interior, dtype=np.float64)
        self.contour = np.asarray(self.contour, dtype=np.float64)
        check_same_shape(self.background, self.interior, self.contour)

    @property
    def shape(self) -> tuple[int, int]:
        return self.interior.shape

    def stack(self) -> np.ndarray:
        """``(H, W, 3)`` array in background, interior, contour order."""
        return np.stack([self.background, self.interior, self.contour], axis=2)

    @classmethod
    def from_stack(cls, arr: np.ndarray, normalized: bool = True) -> "ClassProbMaps":
        return cls(arr[..., 0], arr[..., 1], arr[..., 2], normalized)


def fuse_probability_maps(maps: Sequence[ClassProbMaps], weights: Sequence[float] | None = None) -> ClassProbMaps:
    """Per-pixel, per-class weighted mean of several models' maps."""
    if not maps:
        raise ValueError("need at least one probability map")
    if weights is None:
        weights = [1.0] * len(maps)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(maps) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative, not all zero, one per map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise DimensionError(f"map shape {m.shape} != {shape}")
    total = w.sum()
    fused = []
    for attr in ("background", "interior", "contour"):
        acc = np.zeros(shape)
        for wi, m in zip(w, maps):
            acc += wi * getattr(m, attr)
        fused.append(acc / total)
    return ClassProbMaps(*fused, normalized=all(m.normalized for m in maps))


@dataclasses.dataclass
class CandidateRecord:
    id: int
    area: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    centroid: tuple[float, float]  # x, y
    score: float | None = None  # predicted IoU once filtered


@dataclasses.dataclass
class CandidateSet:
    labels: np.ndarray
    records: list[CandidateRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.records]

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "CandidateSet":
        labels = np.asarray(labels, dtype=LABEL_DTYPE)
        ids = np.unique(labels)
        ids = ids[ids > 0]
        records = []
        if len(ids):
            ys, xs = np.nonzero(labels)
            lab = labels[ys, xs]
            dense = np.searchsorted(ids, lab)
            area = np.bincount(dense, minlength=len(ids))
            sx = np.bincount(dense, weights=xs, minlength=len(ids))
            sy = np.bincount(dense, weights=ys, minlength=len(ids))
            x0 = np.full(len(ids), np.iinfo(np.int64).max)
            y0 = x0.copy()
            x1 = np.full(len(ids), -1)
            y1 = x1.copy()
            np.minimum.at(x0, dense, xs)
            np.minimum.at(y0, dense, ys)
            np.maximum.at(x1, dense, xs)
            np.maximum.at(y1, dense, ys)
            for k, i in enumerate(ids):
                records.append(
                    CandidateRecord(
                        id=int(i),
                        area=int(area[k]),
                        bbox=(int(x0[k]), int(y0[k]), int(x1[k]) + 1, int(y1[k]) + 1),
                        centroid=(float(sx[k] / area[k]), float(sy[k] / area[k])),
                    )
                )
        return cls(labels, records)

    def to_json(self) -> str:
        return json.dumps(
            {
                "height": int(self.labels.shape[0]),
                "width": int(self.labels.shape[1]),
                "candidates": [dataclasses.asdict(r) for r in self.records],
            },
            indent=1,
        )


def remove_small(labels: np.ndarray, min_area: int) -> np.ndarray:
    labels = np.asarray(labels)
    if min_area <= 1:
        return labels.copy()
    counts = np.bincount(labels.ravel().astype(np.int64))
    small = counts < min_area
    small[0] = False
    return np.where(small[labels], 0, labels).astype(labels.dtype)


def instances_from_three_class(
    maps: ClassProbMaps,
    interior_thresh: float = 0.5,
    min_area: int = 20,
    connectivity: int = 8,
) -> CandidateSet:
    """Markers are confident interior away from contours; they then grow over all cell pixels."""
    if not 0 <= interior_thresh <= 1:
        raise ValueError("interior_thresh must be in [0, 1]")
    core = (maps.interior >= interior_thresh) & (maps.contour < interior_thresh)
    markers, _ = connected_components(core, connectivity)
    markers = remove_small(markers, min_area)
    # renumber survivors 1..K in raster order of first pixel
    _, first = np.unique(markers, return_index=True)
    ids = markers.ravel()[np.sort(first)]
    ids = ids[ids > 0]
    lut = np.zeros(int(markers.max()) + 1, dtype=LABEL_DTYPE)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=LABEL_DTYPE)
    markers = lut[markers]
    foreground = (maps.interior + maps.contour) >= interior_thresh
    grown = competitive_region_growing(
        markers, foreground, config=GrowConfig(connectivity=connectivity, seed_disk_radius=0)
    )
    return CandidateSet.from_labels(grown)


# --------------------------------------------------------------------------
# classical baseline


@dataclasses.dataclass(frozen=True)
class BaselineConfig:
    window_radius: int = 5
    rf_threshold: float = 0.5
    open_radius: int = 1
    min_peak_dist: int = 7
    min_area: int = 20
    connectivity: int = 8
    border_thickness: int = 4


def find_peaks(values: np.ndarray, min_distance: int) -> np.ndarray:
    """Regional maxima of ``values`` (> 0) kept at least ``min_distance`` apart.

    Candidates are pixels not exceeded by any 8-neighbour; they are accepted
    greedily by decreasing value (raster order on ties) and suppress every
    later candidate closer than ``min_distance``.  Returns ``(n, 2)`` (y, x) coordinates.
    """
    values = np.asarray(values, dtype=np.float64)
    r = int(min_distance)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    local_max = ndimage.maximum_filter(values, size=3, mode="constant", cval=0.0)
    cy, cx = np.nonzero((values == local_max) & (values > 0))
    order = np.lexsort((cx, cy, -values[cy, cx]))
    near = yy * yy + xx * xx < r * r
    ny, nx = yy[near], xx[near]
    h, w = values.shape
    blocked = np.zeros((h, w), dtype=bool)
    keep = []
    for k in order:
        y, x = cy[k], cx[k]
        if blocked[y, x]:
            continue
        keep.append((y, x))
        py, px = y + ny, x + nx
        ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
        blocked[py[ok], px[ok]] = True
    return np.asarray(keep, dtype=np.int64).reshape(-1, 2)


def semantic_mask(image: np.ndarray, rf: ForestModel, cfg: BaselineConfig):
    """RF foreground mask (after a small opening) and the raw vote fraction."""
    feats = extract_pixel_features(image, cfg.window_radius)
    mask, prob = predict_semantic(rf, feats, cfg.rf_threshold)
    if cfg.open_radius > 0:
        mask = opening(mask, cfg.open_radius)
    return mask, prob


def segment_mask(mask: np.ndarray, cfg: BaselineConfig) -> np.ndarray:
    """Split a foreground mask into instances with distance-peak markers."""
    dist = distance_transform(mask)
    peaks = find_peaks(dist, cfg.min_peak_dist)
    markers = np.zeros(mask.shape, dtype=LABEL_DTYPE)
    if len(peaks):
        # ids follow raster order of the peaks
        order = np.lexsort((peaks[:, 1], peaks[:, 0]))
        peaks = peaks[order]
        markers[peaks[:, 0], peaks[:, 1]] = np.arange(1, len(peaks) + 1, dtype=LABEL_DTYPE)
    grown = competitive_region_growing(
        markers, mask, config=GrowConfig(connectivity=cfg.connectivity, seed_disk_radius=0)
    )
    return remove_small(grown, cfg.min_area)


def baseline_segment(image: np.ndarray, rf: ForestModel, cfg: BaselineConfig | None = None) -> CandidateSet:
    if not isinstance(rf, ForestModel) or rf.n_trees == 0:
        raise ValueError("baseline_segment needs a trained ForestModel")
    cfg = cfg or BaselineConfig()
    mask, _ = semantic_mask(image, rf, cfg)
    return CandidateSet.from_labels(segment_mask(mask, cfg))


def class_maps_from_instances(
    prob: np.ndarray, instances: np.ndarray, border_thickness: int = 4
) -> ClassProbMaps:
    """Soft three-class maps: contour on touching-cell interfaces, interior = vote fraction inside cells."""
    band = interface_band(instances, border_thickness).astype(np.float64)
    interior = np.where(instances > 0, prob, 0.0) * (1.0 - band)
    background = 1.0 - interior - band
    return ClassProbMaps(background, interior, band, normalized=True)


def baseline_class_maps(image: np.ndarray, rf: ForestModel, cfg: BaselineConfig | None = None) -> ClassProbMaps:
    cfg = cfg or BaselineConfig()
    mask, prob = semantic_mask(image, rf, cfg)
    instances = segment_mask(mask, cfg)
    return class_maps_from_instances(prob, instances, cfg.border_thickness)
