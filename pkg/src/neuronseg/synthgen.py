"""Synthetic NeuN-like scenes with exact ground truth.

Cells are rotated ellipses of brown stain on pale tissue.  A configurable
fraction of cells is placed against an existing cell so that it touches or
partially overlaps it; later cells are drawn on top, but a placement is
rejected if it would hide half of an earlier cell, cover its centre, or cut
it in two.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .labelsynth import PointAnnotations
from .raster import LABEL_DTYPE, write_labels, write_png

logger = logging.getLogger(__name__)

# cells per 10,000 px^2 and touching probability for the three density levels
DENSITY_PRESETS = {
    "sparse": dict(density=2.0, touch_probability=0.05),
    "dense": dict(density=4.5, touch_probability=0.35),
    "very-dense": dict(density=7.0, touch_probability=0.6),
}


@dataclasses.dataclass(frozen=True)
class SceneConfig:
    width: int = 512
    height: int = 512
    n_cells: int | None = None
    density: float = 2.0
    radius_range: tuple[float, float] = (7.0, 11.0)
    eccentricity_range: tuple[float, float] = (0.0, 0.6)
    touch_probability: float = 0.05
    soma_rgb: tuple[float, float, float] = (125.0, 80.0, 50.0)
    soma_rgb_std: float = 12.0
    background_rgb: tuple[float, float, float] = (226.0, 214.0, 198.0)
    background_variation: float = 6.0
    noise_sigma: float = 7.0
    edge_gap: int = 2
    max_retries: int = 60
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene dimensions must be positive")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius_range must satisfy 0 < lo <= hi")
        elo, ehi = self.eccentricity_range
        if not 0 <= elo <= ehi < 1:
            raise ValueError("eccentricity_range must satisfy 0 <= lo <= hi < 1")
        if not 0 <= self.touch_probability <= 1:
            raise ValueError("touch_probability must be in [0, 1]")
        if self.n_cells is not None and self.n_cells < 0:
            raise ValueError("n_cells must be >= 0")

    @property
    def target_cells(self) -> int:
        if self.n_cells is not None:
            return self.n_cells
        return int(round(self.density * self.width * self.height / 1e4))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def preset(level: str, width: int = 512, height: int = 512, seed: int = 0) -> SceneConfig:
    """Scene config for ``sparse``, ``dense`` or ``very-dense`` tissue."""
    try:
        params = DENSITY_PRESETS[level]
    except KeyError:
        raise ValueError(f"unknown density level {level!r}; choose from {sorted(DENSITY_PRESETS)}")
    return SceneConfig(width=width, height=height, seed=seed, name=level, **params)


@dataclasses.dataclass
class Scene:
    image: np.ndarray
    labels: np.ndarray
    points: PointAnnotations
    n_requested: int
    n_failed: int
    full_areas: tuple[int, ...] = ()  # un-occluded pixel area of each cell, by id

    def __iter__(self):
        return iter((self.image, self.labels, self.points))


@dataclasses.dataclass
class _Cell:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    color: np.ndarray
    area: int = 0


def _ellipse_rho(cell: _Cell, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Normalised elliptical radius; <= 1 inside the cell."""
    dx = xs - cell.cx
    dy = ys - cell.cy
    c, s = math.cos(cell.theta), math.sin(cell.theta)
    u = (dx * c + dy * s) / cell.a
    v = (-dx * s + dy * c) / cell.b
    return np.sqrt(u * u + v * v)


def _bbox(cell: _Cell, pad: float, h: int, w: int):
    r = cell.a + pad
    y0, y1 = max(0, int(math.floor(cell.cy - r))), min(h, int(math.ceil(cell.cy + r)) + 1)
    x0, x1 = max(0, int(math.floor(cell.cx - r))), min(w, int(math.ceil(cell.cx + r)) + 1)
    return y0, y1, x0, x1


def _try_place(cell: _Cell, cells: list[_Cell], labels: np.ndarray, touching: bool, gap: int) -> bool:
    h, w = labels.shape
    cyi, cxi = int(round(cell.cy)), int(round(cell.cx))
    if not (0 <= cyi < h and 0 <= cxi < w):
        return False
    y0, y1, x0, x1 = _bbox(cell, gap + 1, h, w)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    rho = _ellipse_rho(cell, ys, xs)
    inside = rho <= 1.0
    if not inside.any() or not inside[cyi - y0, cxi - x0]:
        return False
    window = labels[y0:y1, x0:x1]
    if not touching:
        halo = rho <= 1.0 + (gap + 0.5) / cell.b
        return not window[halo].any()

    covered = window[inside]
    for lab in np.unique(covered[covered > 0]):
        old = cells[lab - 1]
        oy, ox = int(round(old.cy)), int(round(old.cx))
        if y0 <= oy < y1 and x0 <= ox < x1 and inside[oy - y0, ox - x0]:
            return False
        oy0, oy1, ox0, ox1 = _bbox(old, 1, h, w)
        ry0, ry1, rx0, rx1 = min(y0, oy0), max(y1, oy1), min(x0, ox0), max(x1, ox1)
        remaining = labels[ry0:ry1, rx0:rx1] == lab
        remaining[y0 - ry0 : y1 - ry0, x0 - rx0 : x1 - rx0] &= ~inside
        if remaining.sum() < 0.5 * old.area:
            return False
        if ndimage.label(remaining, structure=np.ones((3, 3)))[1] != 1:
            return False
    return True


def generate_scene(cfg: SceneConfig) -> Scene:
    """Render one scene; fully determined by ``cfg`` (including its seed)."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    labels = np.zeros((h, w), dtype=LABEL_DTYPE)
    cells: list[_Cell] = []
    n_failed = 0
    target = cfg.target_cells

    for _ in range(target):
        placed = False
        for _attempt in range(cfg.max_retries):
            a = rng.uniform(*cfg.radius_range)
            e = rng.uniform(*cfg.eccentricity_range)
            b = a * math.sqrt(1.0 - e * e)
            theta = rng.uniform(0.0, math.pi)
            shade = rng.normal(0.0, cfg.soma_rgb_std)
            jitter = rng.normal(0.0, cfg.soma_rgb_std / 4, 3)
            color = np.clip(np.asarray(cfg.soma_rgb) + shade + jitter, 0, 255)
            touching = bool(cells) and rng.random() < cfg.touch_probability
            if touching:
                other = cells[rng.integers(len(cells))]
                phi = rng.uniform(0.0, 2 * math.pi)
                dist = (math.sqrt(other.a * other.b) + math.sqrt(a * b)) * rng.uniform(0.8, 1.0)
                cx = other.cx + dist * math.cos(phi)
                cy = other.cy + dist * math.sin(phi)
            else:
                cx = rng.uniform(0, w - 1)
                cy = rng.uniform(0, h - 1)
            cell = _Cell(cx, cy, a, b, theta, color)
            if _try_place(cell, cells, labels, touching, cfg.edge_gap):
                placed = True
                break
        if not placed:
            n_failed += 1
            continue
        y0, y1, x0, x1 = _bbox(cell, 1, h, w)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        inside = _ellipse_rho(cell, ys, xs) <= 1.0
        cell.area = int(inside.sum())
        cells.append(cell)
        labels[y0:y1, x0:x1][inside] = len(cells)

    if n_failed:
        logger.warning("placed %d of %d cells (%d placements failed)", len(cells), target, n_failed)

    image = _render(cfg, cells, labels, rng)
    points = PointAnnotations(
        ids=np.arange(1, len(cells) + 1),
        xs=[int(round(c.cx)) for c in cells],
        ys=[int(round(c.cy)) for c in cells],
        shape=(h, w),
    )
    return Scene(
        image=image,
        labels=labels,
        points=points,
        n_requested=target,
        n_failed=n_failed,
        full_areas=tuple(c.area for c in cells),
    )


def _render(cfg: SceneConfig, cells: list[_Cell], labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    drift = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=12.0)
    drift *= cfg.background_variation / max(drift.std(), 1e-9)
    img = np.empty((h, w, 3))
    img[:] = np.asarray(cfg.background_rgb)
    img += drift[..., None]

    for k, cell in enumerate(cells, start=1):
        y0, y1, x0, x1 = _bbox(cell, 1, h, w)
        own = labels[y0:y1, x0:x1] == k
        if not own.any():
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        rho = _ellipse_rho(cell, ys[own], xs[own])
        alpha = 1.0 - 0.4 * rho**4  # stain fades towards the membrane
        patch = img[y0:y1, x0:x1]
        patch[own] = alpha[:, None] * cell.color + (1.0 - alpha[:, None]) * patch[own]

    img += rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# datasets on disk


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_scene(scene: Scene, scene_dir: str | os.PathLike) -> dict[str, str]:
    """Write image/labels/centroids into ``scene_dir``; returns ``{file: sha256}``."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    write_png(scene_dir / "image.png", scene.image)
    label_path = write_labels(scene_dir / "labels.png", scene.labels)
    scene.points.write_csv(scene_dir / "centroids.csv")
    files = [scene_dir / "image.png", label_path, scene_dir / "centroids.csv"]
    return {f.name: sha256_file(f) for f in files}


def generate_dataset(configs: Sequence[SceneConfig], out_dir: str | os.PathLike) -> dict:
    """Write ``scene_<k>/`` directories plus ``manifest.json`` and return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, cfg in enumerate(configs):
        scene = generate_scene(cfg)
        name = f"scene_{k}"
        checksums = write_scene(scene, out_dir / name)
        entries.append(
            {
                "scene": name,
                "config": cfg.to_dict(),
                "seed": cfg.seed,
                "n_cells": len(scene.points),
                "n_failed": scene.n_failed,
                "files": checksums,
            }
        )
    manifest = {"format": "neuronseg.dataset", "version": 1, "scenes": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(dataset_dir: str | os.PathLike) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text())
