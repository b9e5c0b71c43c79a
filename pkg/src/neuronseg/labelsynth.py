"""Instance labels from point annotations.

The chain is: stamp each annotated centroid as a small disk, let the disks
compete for the foreground of a semantic mask (priority-queue region
growing), then turn the resulting instances into a three-class mask whose
contour class marks the interfaces between touching cells.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import logging
import math
import os
from pathlib import Path

import numba
import numpy as np

from .raster import (
    LABEL_DTYPE,
    DimensionError,
    PixelClass,
    check_same_shape,
    disk,
    instance_boundaries,
    neighbor_offsets,
)

logger = logging.getLogger(__name__)


class Priority(str, enum.Enum):
    GEODESIC = "geodesic"
    INTENSITY = "intensity"


@dataclasses.dataclass(frozen=True)
class GrowConfig:
    """Region-growing parameters.

    ``GEODESIC`` cost is the number of steps from the seed disk (diagonal
    steps count 1 under 8-connectivity).  ``INTENSITY`` cost is the largest
    ``|gray - mean seed gray|`` met along the path.
    """

    connectivity: int = 8
    seed_disk_radius: int = 5
    priority: Priority = Priority.GEODESIC

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.seed_disk_radius < 0:
            raise ValueError("seed_disk_radius must be >= 0")
        object.__setattr__(self, "priority", Priority(self.priority))


@dataclasses.dataclass
class PointAnnotations:
    """Expert centroids: parallel arrays of ids and pixel coordinates."""

    ids: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    shape: tuple[int, int] | None = None  # (height, width) of the annotated image

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).ravel()
        self.xs = np.asarray(self.xs, dtype=np.int64).ravel()
        self.ys = np.asarray(self.ys, dtype=np.int64).ravel()
        if not len(self.ids) == len(self.xs) == len(self.ys):
            raise ValueError("ids, xs and ys must have equal length")
        if len(self.ids):
            if self.ids.min() < 1:
                raise ValueError("point ids must be positive")
            if len(np.unique(self.ids)) != len(self.ids):
                raise ValueError("point ids must be unique")
        if self.shape is not None:
            self.check_bounds(self.shape)

    def __len__(self) -> int:
        return len(self.ids)

    def check_bounds(self, shape: tuple[int, int]) -> None:
        h, w = shape[:2]
        bad = (self.xs < 0) | (self.xs >= w) | (self.ys < 0) | (self.ys >= h)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"point id {self.ids[i]} at ({self.xs[i]}, {self.ys[i]}) is outside a {w}x{h} image"
            )

    @classmethod
    def empty(cls, shape=None) -> "PointAnnotations":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), shape)

    @classmethod
    def read_csv(cls, path: str | os.PathLike, shape=None) -> "PointAnnotations":
        with open(path) as fh:
            header = [c.strip() for c in fh.readline().strip().split(",")]
            if header != ["id", "x", "y"]:
                raise ValueError(f"{path}: expected header 'id,x,y', got {header}")
            body = fh.read()
        if not body.strip():
            return cls.empty(shape)
        data = np.loadtxt(io.StringIO(body), delimiter=",", dtype=np.int64, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], shape)

    def write_csv(self, path: str | os.PathLike) -> None:
        rows = ["id,x,y"] + [f"{i},{x},{y}" for i, x, y in zip(self.ids, self.xs, self.ys)]
        Path(path).write_text("\n".join(rows) + "\n")


def rasterize_point_labels(points: PointAnnotations, shape: tuple[int, int], radius: int = 5) -> np.ndarray:
    """Stamp every point as a filled disk carrying its id.

    Disks are drawn in list order, so a later point overwrites an earlier one
    where the disks overlap.  Disks are clipped at the image border.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    h, w = shape[:2]
    points.check_bounds((h, w))
    labels = np.zeros((h, w), dtype=LABEL_DTYPE)
    dy, dx = np.nonzero(disk(radius))
    dy = dy - radius
    dx = dx - radius
    for pid, x, y in zip(points.ids, points.xs, points.ys):
        yy, xx = y + dy, x + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        labels[yy[ok], xx[ok]] = pid
    return labels


# --------------------------------------------------------------------------
# competitive region growing


@numba.njit(cache=True, inline="always")
def _less(c1, i1, y1, x1, c2, i2, y2, x2):
    if c1 != c2:
        return c1 < c2
    if i1 != i2:
        return i1 < i2
    if y1 != y2:
        return y1 < y2
    return x1 < x2


@numba.njit(cache=True)
def _grow_kernel(seeds, fg, plane, seed_mean, use_intensity, offsets):
    h, w = seeds.shape
    out = seeds.copy()
    done = seeds > 0
    best_cost = np.full((h, w), np.inf)
    best_id = np.zeros((h, w), dtype=np.int64)

    cap = 1024
    hc = np.empty(cap, dtype=np.float64)
    hi = np.empty(cap, dtype=np.int64)
    hy = np.empty(cap, dtype=np.int64)
    hx = np.empty(cap, dtype=np.int64)
    size = 0

    n_off = offsets.shape[0]
    for y0 in range(h):
        for x0 in range(w):
            lab = seeds[y0, x0]
            if lab == 0:
                continue
            for k in range(n_off):
                y = y0 + offsets[k, 0]
                x = x0 + offsets[k, 1]
                if y < 0 or y >= h or x < 0 or x >= w or done[y, x] or not fg[y, x]:
                    continue
                if use_intensity:
                    c = abs(plane[y, x] - seed_mean[lab])
                else:
                    c = 1.0
                if _less(c, lab, 0, 0, best_cost[y, x], best_id[y, x], 0, 0):
                    best_cost[y, x] = c
                    best_id[y, x] = lab
                    # push (c, lab, y, x)
                    if size == cap:
                        cap *= 2
                        hc2 = np.empty(cap, dtype=np.float64)
                        hi2 = np.empty(cap, dtype=np.int64)
                        hy2 = np.empty(cap, dtype=np.int64)
                        hx2 = np.empty(cap, dtype=np.int64)
                        hc2[:size] = hc[:size]
                        hi2[:size] = hi[:size]
                        hy2[:size] = hy[:size]
                        hx2[:size] = hx[:size]
                        hc, hi, hy, hx = hc2, hi2, hy2, hx2
                    j = size
                    size += 1
                    while j > 0:
                        p = (j - 1) // 2
                        if _less(c, lab, y, x, hc[p], hi[p], hy[p], hx[p]):
                            hc[j], hi[j], hy[j], hx[j] = hc[p], hi[p], hy[p], hx[p]
                            j = p
                        else:
                            break
                    hc[j], hi[j], hy[j], hx[j] = c, lab, y, x

    while size > 0:
        c, lab, y0, x0 = hc[0], hi[0], hy[0], hx[0]
        # pop: move last element to the root and sift down
        size -= 1
        if size > 0:
            lc, li, ly, lx = hc[size], hi[size], hy[size], hx[size]
            j = 0
            while True:
                a = 2 * j + 1
                if a >= size:
                    break
                b = a + 1
                m = a
                if b < size and _less(hc[b], hi[b], hy[b], hx[b], hc[a], hi[a], hy[a], hx[a]):
                    m = b
                if _less(hc[m], hi[m], hy[m], hx[m], lc, li, ly, lx):
                    hc[j], hi[j], hy[j], hx[j] = hc[m], hi[m], hy[m], hx[m]
                    j = m
                else:
                    break
            hc[j], hi[j], hy[j], hx[j] = lc, li, ly, lx

        if done[y0, x0] or best_cost[y0, x0] != c or best_id[y0, x0] != lab:
            continue
        done[y0, x0] = True
        out[y0, x0] = lab

        for k in range(n_off):
            y = y0 + offsets[k, 0]
            x = x0 + offsets[k, 1]
            if y < 0 or y >= h or x < 0 or x >= w or done[y, x] or not fg[y, x]:
                continue
            if use_intensity:
                nc = max(c, abs(plane[y, x] - seed_mean[lab]))
            else:
                nc = c + 1.0
            if _less(nc, lab, 0, 0, best_cost[y, x], best_id[y, x], 0, 0):
                best_cost[y, x] = nc
                best_id[y, x] = lab
                if size == cap:
                    cap *= 2
                    hc2 = np.empty(cap, dtype=np.float64)
                    hi2 = np.empty(cap, dtype=np.int64)
                    hy2 = np.empty(cap, dtype=np.int64)
                    hx2 = np.empty(cap, dtype=np.int64)
                    hc2[:size] = hc[:size]
                    hi2[:size] = hi[:size]
                    hy2[:size] = hy[:size]
                    hx2[:size] = hx[:size]
                    hc, hi, hy, hx = hc2, hi2, hy2, hx2
                j = size
                size += 1
                while j > 0:
                    p = (j - 1) // 2
                    if _less(nc, lab, y, x, hc[p], hi[p], hy[p], hx[p]):
                        hc[j], hi[j], hy[j], hx[j] = hc[p], hi[p], hy[p], hx[p]
                        j = p
                    else:
                        break
                hc[j], hi[j], hy[j], hx[j] = nc, lab, y, x
    return out


def competitive_region_growing(
    seeds: np.ndarray,
    constraint: np.ndarray,
    intensity: np.ndarray | None = None,
    config: GrowConfig | None = None,
) -> np.ndarray:
    """Grow every seed region over the foreground of ``constraint``.

    Seed pixels outside the foreground are discarded first; seeds left with no
    pixel at all are dropped with a warning.  All regions then expand from a
    single priority queue ordered by ``(cost, id, y, x)``, each pixel being
    claimed once by the cheapest (then lowest-id) region that reaches it.
    Seed pixels keep their ids.  Foreground not connected to any seed stays 0.
    """
    config = config or GrowConfig()
    seeds = np.asarray(seeds)
    constraint = np.asarray(constraint, dtype=bool)
    check_same_shape(seeds, constraint)
    use_intensity = config.priority is Priority.INTENSITY
    if use_intensity:
        if intensity is None:
            raise ValueError("intensity priority needs an intensity plane")
        check_same_shape(seeds, intensity)

    clipped = np.where(constraint, seeds, 0)
    all_ids = np.unique(seeds)
    kept_ids, dense = np.unique(clipped, return_inverse=True)
    dropped = np.setdiff1d(all_ids[all_ids > 0], kept_ids)
    if len(dropped):
        logger.warning("%d seed(s) lie entirely outside the foreground and were dropped", len(dropped))
    if kept_ids[-1] == 0:
        logger.warning("no seeds on foreground; returning an empty label map")
        return np.zeros(seeds.shape, dtype=LABEL_DTYPE)
    dense = dense.reshape(seeds.shape).astype(np.int64)
    if kept_ids[0] != 0:  # no background pixels at all
        dense += 1
        kept_ids = np.concatenate([[0], kept_ids])

    if use_intensity:
        plane = np.asarray(intensity, dtype=np.float64)
        sums = np.bincount(dense.ravel(), weights=plane.ravel(), minlength=len(kept_ids))
        counts = np.bincount(dense.ravel(), minlength=len(kept_ids))
        seed_mean = sums / np.maximum(counts, 1)
    else:
        plane = np.zeros((1, 1))
        seed_mean = np.zeros(len(kept_ids))

    grown = _grow_kernel(
        dense, constraint, plane, seed_mean, use_intensity, neighbor_offsets(config.connectivity)
    )
    return kept_ids[grown].astype(LABEL_DTYPE)


# --------------------------------------------------------------------------
# three-class masks


def _interface_stencils(half_band: int):
    """Pixel offsets within ``half_band - 0.5`` of a horizontal / vertical midpoint."""
    r = half_band - 0.5
    span = np.arange(-half_band - 1, half_band + 2)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    # midpoint between (0, 0) and (0, 1) sits at (0, 0.5)
    horiz = (yy**2 + (xx - 0.5) ** 2) <= r * r
    vert = ((yy - 0.5) ** 2 + xx**2) <= r * r
    return (
        np.stack([yy[horiz], xx[horiz]], axis=1),
        np.stack([yy[vert], xx[vert]], axis=1),
    )


def interface_band(instances: np.ndarray, border_thickness: int = 4) -> np.ndarray:
    """Pixels within ``ceil(t/2)`` pixels (either side) of a touching-cell interface.

    An interface point is the midpoint between two 4-adjacent pixels carrying
    different non-zero labels.  A pixel belongs to the band when its centre
    lies within ``ceil(t/2) - 0.5`` of such a midpoint, which gives a band
    exactly ``2 * ceil(t/2)`` pixels wide across a straight interface.
    """
    if border_thickness < 1:
        raise ValueError("border_thickness must be >= 1")
    lab = np.asarray(instances)
    h, w = lab.shape
    band = np.zeros((h, w), dtype=bool)
    half = math.ceil(border_thickness / 2)
    horiz_st, vert_st = _interface_stencils(half)

    a, b = lab[:, :-1], lab[:, 1:]
    hy, hx = np.nonzero((a != b) & (a > 0) & (b > 0))
    a, b = lab[:-1, :], lab[1:, :]
    vy, vx = np.nonzero((a != b) & (a > 0) & (b > 0))

    for (ys, xs), stencil in (((hy, hx), horiz_st), ((vy, vx), vert_st)):
        if not len(ys):
            continue
        for dy, dx in stencil:
            yy, xx = ys + dy, xs + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            band[yy[ok], xx[ok]] = True
    return band


def synthesize_three_class_mask(instances: np.ndarray, border_thickness: int = 4) -> np.ndarray:
    """Background / interior / contour mask from an instance label map.

    Only interfaces between two different cells produce contour; a cell's
    border with the background does not.
    """
    lab = np.asarray(instances)
    out = np.full(lab.shape, PixelClass.BACKGROUND, dtype=np.uint8)
    out[lab > 0] = PixelClass.INTERIOR
    out[interface_band(lab, border_thickness)] = PixelClass.CONTOUR
    return out


def overlay_contours(image: np.ndarray, instances: np.ndarray, color=(255, 0, 0)) -> np.ndarray:
    """Recolour the 1-px inner boundary of every instance for visual QA."""
    image = np.asarray(image)
    check_same_shape(image, instances)
    if image.ndim == 2:
        out = np.repeat(image[..., None], 3, axis=2)
    elif image.ndim == 3 and image.shape[2] == 3:
        out = image.copy()
    else:
        raise DimensionError(f"cannot overlay on image of shape {image.shape}")
    out[instance_boundaries(instances, connectivity=4)] = np.asarray(color, dtype=np.uint8)
    return out


def synthesize_labels(
    semantic: np.ndarray,
    points: PointAnnotations,
    intensity: np.ndarray | None = None,
    grow: GrowConfig | None = None,
    border_thickness: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Point labels + semantic mask -> (instance map, three-class mask)."""
    grow = grow or GrowConfig()
    seeds = rasterize_point_labels(points, semantic.shape, grow.seed_disk_radius)
    instances = competitive_region_growing(seeds, semantic, intensity, grow)
    return instances, synthesize_three_class_mask(instances, border_thickness)
