"""Overlapping window extraction and weighted re-assembly of large images."""

from __future__ import annotations

import dataclasses
import json
from typing import Iterable, Iterator

import numpy as np

DEFAULT_WINDOW = 1340
DEFAULT_STRIDE = 1220


class TilingError(ValueError):
    pass


def axis_origins(length: int, window: int, stride: int) -> list[int]:
    """Window origins along one axis; the last window is shifted to end at the edge."""
    if window > length:
        raise TilingError(f"window {window} exceeds image size {length}")
    if not 1 <= stride <= window:
        raise TilingError(f"stride must be in [1, window], got {stride}")
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] + window < length:
        origins.append(length - window)
    return origins


@dataclasses.dataclass(frozen=True)
class TilingPlan:
    width: int
    height: int
    window: int
    stride: int
    xs: tuple[int, ...]
    ys: tuple[int, ...]
    edge_policy: str = "clamp_last"

    @property
    def positions(self) -> list[tuple[int, int]]:
        """Tile origins ``(x, y)`` in row-major order."""
        return [(x, y) for y in self.ys for x in self.xs]

    @property
    def n_tiles(self) -> int:
        return len(self.xs) * len(self.ys)

    @property
    def overlap(self) -> int:
        return self.window - self.stride

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "window": self.window,
            "stride": self.stride,
            "overlap": self.overlap,
            "edge_policy": self.edge_policy,
            "n_tiles": self.n_tiles,
            "positions": [list(p) for p in self.positions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def plan_tiling(width: int, height: int, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> TilingPlan:
    return TilingPlan(
        width=width,
        height=height,
        window=window,
        stride=stride,
        xs=tuple(axis_origins(width, window, stride)),
        ys=tuple(axis_origins(height, window, stride)),
    )


def extract_patches(image: np.ndarray, plan: TilingPlan) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
    """Yield ``((x, y), crop)`` for every tile; crops are views into ``image``."""
    if image.shape[:2] != (plan.height, plan.width):
        raise TilingError(f"image shape {image.shape[:2]} does not match plan {(plan.height, plan.width)}")
    w = plan.window
    for x, y in plan.positions:
        yield (x, y), image[y : y + w, x : x + w]


def axis_weights(window: int, overlap: int, min_weight: float = 0.01) -> np.ndarray:
    if not 0 <= overlap < window:
        raise ValueError("overlap must be in [0, window)")
    if not 0 < min_weight <= 1:
        raise ValueError("min_weight must be in (0, 1]")
    if overlap == 0:
        return np.ones(window)
    i = np.arange(window)
    edge_dist = np.minimum(i, window - 1 - i)
    return min_weight + (1.0 - min_weight) * np.minimum(edge_dist / overlap, 1.0)


def make_weight_map(window: int, overlap: int, min_weight: float = 0.01) -> np.ndarray:
    """Separable linear ramp: ``min_weight`` at the tile edge, 1 from ``overlap`` px inwards."""
    a = axis_weights(window, overlap, min_weight)
    return np.outer(a, a)


def assemble(
    patches: Iterable[tuple[tuple[int, int], np.ndarray]],
    plan: TilingPlan,
    weight_map: np.ndarray,
) -> np.ndarray:
    """Weighted average of overlapping patches, ``sum(w * v) / sum(w)`` per pixel.

    Patches may carry trailing channel axes.  Pixels covered by a single tile
    get that tile's value unchanged.
    """
    w = plan.window
    if weight_map.shape != (w, w):
        raise TilingError(f"weight map shape {weight_map.shape} != window {w}")
    num = den = single = None
    count = np.zeros((plan.height, plan.width), dtype=np.int32)
    for (x, y), patch in patches:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape[:2] != (w, w):
            raise TilingError(f"patch at {(x, y)} has shape {patch.shape[:2]}, expected {(w, w)}")
        if num is None:
            full = (plan.height, plan.width) + patch.shape[2:]
            num = np.zeros(full)
            den = np.zeros((plan.height, plan.width))
            single = np.zeros(full)
        wm = weight_map.reshape(weight_map.shape + (1,) * (patch.ndim - 2))
        num[y : y + w, x : x + w] += wm * patch
        den[y : y + w, x : x + w] += weight_map
        single[y : y + w, x : x + w] = patch
        count[y : y + w, x : x + w] += 1
    if num is None or (count == 0).any():
        raise TilingError("assembly left pixels uncovered")
    num /= den.reshape(den.shape + (1,) * (num.ndim - 2))
    once = count == 1
    num[once] = single[once]
    return num
