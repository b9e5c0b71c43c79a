"""End-to-end stages shared by the command-line interface and the tests."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .features_rf import (
    ForestModel,
    extract_pixel_features,
    predict_semantic,
    sample_training_pixels,
    train_random_forest,
)
from .instance import (
    BaselineConfig,
    CandidateSet,
    ClassProbMaps,
    baseline_class_maps,
    instances_from_three_class,
)
from .labelsynth import PointAnnotations, overlay_contours, synthesize_labels
from .postfilter import GbtModel, extract_candidate_features, filter_candidates, true_iou_targets
from .raster import PixelClass, read_image, read_labels, rgb_to_gray
from .synthgen import load_manifest
from .tiling import TilingPlan, assemble, extract_patches, make_weight_map, plan_tiling

logger = logging.getLogger(__name__)

# rough peak working set per tile pixel: features, votes, class maps, region-growing state
BYTES_PER_TILE_PIXEL = 160


class ResourceGuardError(RuntimeError):
    pass


class InvariantError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# datasets


@dataclasses.dataclass
class SceneFiles:
    name: str
    image: Path
    labels: Path
    centroids: Path


def dataset_scenes(dataset_dir: str | Path, names: Sequence[str] | None = None) -> list[SceneFiles]:
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    out = []
    for entry in manifest["scenes"]:
        name = entry["scene"]
        if names and name not in names:
            continue
        label_file = next(f for f in entry["files"] if f.startswith("labels"))
        d = dataset_dir / name
        out.append(SceneFiles(name, d / "image.png", d / label_file, d / "centroids.csv"))
    if names:
        missing = set(names) - {s.name for s in out}
        if missing:
            raise FileNotFoundError(f"scenes not in manifest: {sorted(missing)}")
    return out


def load_rgb(path: str | Path) -> np.ndarray:
    img = read_image(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img


# --------------------------------------------------------------------------
# random forest


def collect_rf_samples(scenes: Sequence[SceneFiles], cfg: PipelineConfig):
    """Class-balanced pixel samples from each scene's image and ground-truth foreground."""
    xs, ys = [], []
    for k, scene in enumerate(scenes):
        image = load_rgb(scene.image)
        truth = read_labels(scene.labels) > 0
        feats = extract_pixel_features(image, cfg.rf.window_radius)
        rng = np.random.default_rng([cfg.seed, k])
        x, y = sample_training_pixels(feats, truth, cfg.rf.samples_per_scene, rng)
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


def train_rf(X: np.ndarray, y: np.ndarray, cfg: PipelineConfig) -> ForestModel:
    return train_random_forest(X, y, cfg.forest_params())


# --------------------------------------------------------------------------
# label synthesis


@dataclasses.dataclass
class SynthResult:
    instances: np.ndarray
    three_class: np.ndarray
    overlay: np.ndarray
    semantic: np.ndarray


def synth_labels(image: np.ndarray, points: PointAnnotations, rf: ForestModel, cfg: PipelineConfig) -> SynthResult:
    feats = extract_pixel_features(image, cfg.rf.window_radius)
    semantic, _ = predict_semantic(rf, feats, cfg.rf.threshold)
    if len(points) == 0:
        logger.warning("no point annotations; the mask will be all background")
    instances, three = synthesize_labels(
        semantic, points, rgb_to_gray(image), cfg.grow_config(), cfg.grow.border_thickness
    )
    overlay = overlay_contours(image, instances, (255, 0, 0))
    check_three_class(instances, three)
    return SynthResult(instances, three, overlay, semantic)


def check_three_class(instances: np.ndarray, three: np.ndarray) -> None:
    """Raise :class:`InvariantError` if the mask is inconsistent with its instances."""
    if three.shape != instances.shape:
        raise InvariantError("three-class mask shape differs from instance map")
    if not np.isin(three, list(PixelClass)).all():
        raise InvariantError("three-class mask holds values outside {0, 1, 2}")
    interior = three == PixelClass.INTERIOR
    if (interior & (instances == 0)).any():
        raise InvariantError("interior pixels outside every instance")
    if ((instances > 0) & (three == PixelClass.BACKGROUND)).any():
        raise InvariantError("labelled pixels classified as background")


# --------------------------------------------------------------------------
# tiled segmentation

_worker_state: dict = {}


def _init_worker(rf_json: str, bcfg: BaselineConfig) -> None:
    import json

    _worker_state["rf"] = ForestModel.from_dict(json.loads(rf_json))
    _worker_state["cfg"] = bcfg


def _tile_maps(patch: np.ndarray) -> np.ndarray:
    return baseline_class_maps(patch, _worker_state["rf"], _worker_state["cfg"]).stack()


@dataclasses.dataclass
class SegmentResult:
    candidates: CandidateSet
    maps: ClassProbMaps
    plan: TilingPlan
    unfiltered: CandidateSet


def check_memory(cfg: PipelineConfig, window: int) -> None:
    need = window * window * BYTES_PER_TILE_PIXEL * cfg.tiling.workers
    budget = cfg.tiling.memory_budget_mb * 1024 * 1024
    if need > budget:
        raise ResourceGuardError(
            f"window {window} with {cfg.tiling.workers} worker(s) needs ~{need / 2**20:.0f} MiB, "
            f"budget is {cfg.tiling.memory_budget_mb} MiB"
        )


def tiled_class_maps(image: np.ndarray, rf: ForestModel, cfg: PipelineConfig) -> tuple[ClassProbMaps, TilingPlan]:
    """Per-tile baseline class maps stitched with the edge-down-weighting ramp."""
    h, w = image.shape[:2]
    t = cfg.tiling
    window = min(t.window, h, w)
    if window < t.window:
        logger.info("window %d clamped to image size %d", t.window, window)
    plan = plan_tiling(w, h, window, min(t.stride, window))
    check_memory(cfg, plan.window)
    bcfg = cfg.baseline_config()
    origins, patches = zip(*extract_patches(image, plan))
    weights = make_weight_map(plan.window, plan.overlap, t.min_weight)
    if t.workers > 1:
        with ProcessPoolExecutor(
            max_workers=t.workers, initializer=_init_worker, initargs=(rf.dumps(), bcfg)
        ) as pool:
            results = pool.map(_tile_maps, [np.ascontiguousarray(p) for p in patches])
            stitched = assemble(zip(origins, results), plan, weights)
    else:
        # a generator, so only one tile's maps are alive at a time
        results = (baseline_class_maps(p, rf, bcfg).stack() for p in patches)
        stitched = assemble(zip(origins, results), plan, weights)
    logger.info("processed %d tiles", plan.n_tiles)
    return ClassProbMaps.from_stack(stitched), plan


def segment_image(
    image: np.ndarray, rf: ForestModel, cfg: PipelineConfig, gbt: GbtModel | None = None
) -> SegmentResult:
    maps, plan = tiled_class_maps(image, rf, cfg)
    cands = instances_from_three_class(
        maps, cfg.filter.interior_thresh, cfg.baseline.min_area, cfg.grow.connectivity
    )
    kept = cands
    if gbt is not None:
        kept = filter_candidates(cands, gbt, maps, cfg.filter.threshold)
        logger.info("post-filter kept %d of %d candidates", len(kept), len(cands))
    return SegmentResult(kept, maps, plan, cands)


def filter_training_table(scenes: Sequence[SceneFiles], rf: ForestModel, cfg: PipelineConfig):
    """Candidate features and their true (best-overlap) IoU over a set of scenes."""
    xs, ys = [], []
    for scene in scenes:
        image = load_rgb(scene.image)
        gt = read_labels(scene.labels)
        res = segment_image(image, rf, cfg)
        xs.append(extract_candidate_features(res.unfiltered, res.maps))
        ys.append(true_iou_targets(res.unfiltered, gt))
    return np.concatenate(xs), np.concatenate(ys)
