"""Command-line interface.

Subcommands: ``gen``, ``train-rf``, ``synth-labels``, ``segment``,
``train-filter``, ``evaluate`` and ``plan``.  Each accepts ``--config
FILE.toml``; explicit flags override the file.

Exit codes: 0 success, 2 bad input, 3 invariant violation, 4 resource guard.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, apply_overrides, load_config
from .features_rf import ForestModel, read_samples_csv, write_samples_csv
from .labelsynth import PointAnnotations
from .metrics import det_f1_csv, evaluate, format_table, reports_to_json
from .pipeline import (
    InvariantError,
    ResourceGuardError,
    SceneFiles,
    collect_rf_samples,
    dataset_scenes,
    filter_training_table,
    load_rgb,
    segment_image,
    synth_labels,
    train_rf,
)
from .postfilter import GbtModel, train_iou_regressor, write_training_table
from .raster import read_labels, write_labels, write_png
from .synthgen import generate_dataset, preset
from .tiling import TilingError, plan_tiling

logger = logging.getLogger("neuronseg")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3
EXIT_RESOURCE = 4

RUN_LOG = "run_log.json"


class InputError(Exception):
    pass


class RunLog:
    """Versions, config digest and per-step timings, written next to the outputs."""

    def __init__(self, command: str, cfg: PipelineConfig):
        self.data = {
            "command": command,
            "neuronseg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "timings_s": {},
        }

    @contextmanager
    def timed(self, step: str):
        t0 = time.perf_counter()
        yield
        self.data["timings_s"][step] = round(time.perf_counter() - t0, 4)

    def write(self, out_dir: Path) -> None:
        (out_dir / RUN_LOG).write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _path(args, cfg: PipelineConfig, key: str, required: bool = True) -> Path | None:
    value = getattr(args, key, None) or cfg.paths.get(key)
    if value is None:
        if required:
            raise InputError(f"missing --{key.replace('_', '-')}")
        return None
    return Path(value)


def _existing(path: Path | None, what: str) -> Path:
    if path is None or not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _scenes(args, cfg) -> list[SceneFiles]:
    dataset = _existing(_path(args, cfg, "dataset"), "dataset")
    try:
        return dataset_scenes(dataset, args.scenes.split(",") if args.scenes else None)
    except (FileNotFoundError, KeyError) as exc:
        raise InputError(str(exc)) from exc


def _load_rf(args, cfg) -> ForestModel:
    path = _existing(_path(args, cfg, "rf_model"), "random-forest model")
    try:
        return ForestModel.load(path)
    except (ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg: PipelineConfig) -> int:
    out = _path(args, cfg, "out")
    log = RunLog("gen", cfg)
    configs = [
        preset(level, cfg.gen.width, cfg.gen.height, seed=cfg.seed * 1000 + s)
        for level in cfg.gen.levels
        for s in cfg.gen.seeds
    ]
    with log.timed("generate"):
        manifest = generate_dataset(configs, out)
    log.data["n_scenes"] = len(manifest["scenes"])
    log.write(out)
    print(f"wrote {len(manifest['scenes'])} scenes to {out}")
    return EXIT_OK


def cmd_train_rf(args, cfg: PipelineConfig) -> int:
    out = _path(args, cfg, "out")
    out.parent.mkdir(parents=True, exist_ok=True)
    log = RunLog("train-rf", cfg)
    samples = _path(args, cfg, "samples", required=False)
    with log.timed("samples"):
        if samples is not None and samples.exists() and not args.dataset:
            X, y = read_samples_csv(samples)
        else:
            X, y = collect_rf_samples(_scenes(args, cfg), cfg)
            if samples is not None:
                write_samples_csv(samples, X, y)
    with log.timed("train"):
        model = train_rf(X, y, cfg)
    model.save(out)
    log.data["n_samples"] = int(len(y))
    log.write(out.parent)
    print(f"trained {model.n_trees} trees on {len(y)} samples -> {out}")
    return EXIT_OK


def _synth_one(image_path: Path, centroids_path: Path, rf, cfg, out: Path, log: RunLog, tag: str = "") -> None:
    image = load_rgb(_existing(image_path, "image"))
    points = PointAnnotations.read_csv(_existing(centroids_path, "centroids file"), shape=image.shape)
    with log.timed(f"synth:{tag}" if tag else "synth"):
        res = synth_labels(image, points, rf, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "three_class.png", res.three_class)
    write_labels(out / "instances.png", res.instances)
    write_png(out / "overlay.png", res.overlay)


def cmd_synth_labels(args, cfg: PipelineConfig) -> int:
    out = _path(args, cfg, "out")
    rf = _load_rf(args, cfg)
    log = RunLog("synth-labels", cfg)
    if args.dataset or (not args.image and cfg.paths.get("dataset")):
        for scene in _scenes(args, cfg):
            _synth_one(scene.image, scene.centroids, rf, cfg, out / scene.name, log, scene.name)
    else:
        _synth_one(_path(args, cfg, "image"), _path(args, cfg, "centroids"), rf, cfg, out, log)
    log.write(out)
    return EXIT_OK


def _segment_one(image_path: Path, rf, gbt, cfg, out: Path, log: RunLog, tag: str = "") -> None:
    image = load_rgb(_existing(image_path, "image"))
    with log.timed(f"segment:{tag}" if tag else "segment"):
        res = segment_image(image, rf, cfg, gbt)
    log.data.setdefault("tiles", {})[tag or "image"] = res.plan.n_tiles
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "labels.png", res.candidates.labels)
    (out / "candidates.json").write_text(res.candidates.to_json())
    (out / "plan.json").write_text(res.plan.to_json())
    logger.info("%s: %d tiles, %d candidates", image_path, res.plan.n_tiles, len(res.candidates))


def cmd_segment(args, cfg: PipelineConfig) -> int:
    out = _path(args, cfg, "out")
    rf = _load_rf(args, cfg)
    gbt_path = _path(args, cfg, "filter_model", required=False)
    gbt = GbtModel.load(_existing(gbt_path, "filter model")) if gbt_path else None
    log = RunLog("segment", cfg)
    if args.dataset or (not args.image and cfg.paths.get("dataset")):
        for scene in _scenes(args, cfg):
            _segment_one(scene.image, rf, gbt, cfg, out / scene.name, log, scene.name)
    else:
        _segment_one(_path(args, cfg, "image"), rf, gbt, cfg, out, log)
    log.write(out)
    return EXIT_OK


def cmd_train_filter(args, cfg: PipelineConfig) -> int:
    out = _path(args, cfg, "out")
    out.parent.mkdir(parents=True, exist_ok=True)
    rf = _load_rf(args, cfg)
    log = RunLog("train-filter", cfg)
    with log.timed("candidates"):
        X, y = filter_training_table(_scenes(args, cfg), rf, cfg)
    if len(y) < 2:
        raise InputError("fewer than two candidates found; cannot train the filter")
    write_training_table(out.with_suffix(".csv"), X, y)
    with log.timed("train"):
        model = train_iou_regressor(X, y, cfg.gbt_params())
    model.save(out)
    log.data["n_candidates"] = int(len(y))
    log.write(out.parent)
    print(f"trained IoU regressor on {len(y)} candidates -> {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    out = _path(args, cfg, "out")
    log = RunLog("evaluate", cfg)
    pairs = []
    pred_dir = _path(args, cfg, "pred_dir", required=False)
    if pred_dir is not None:
        for scene in _scenes(args, cfg):
            pairs.append((scene.name, pred_dir / scene.name / "labels.png", scene.labels, scene.centroids))
    else:
        pred = _path(args, cfg, "pred")
        pairs.append((pred.parent.name or "image", pred, _path(args, cfg, "gt"), _path(args, cfg, "centroids")))
    reports = []
    with log.timed("evaluate"):
        for name, pred_path, gt_path, cen_path in pairs:
            pred = read_labels(_existing(pred_path, "prediction"))
            gt = read_labels(_existing(gt_path, "ground truth"))
            if pred.shape != gt.shape:
                raise InputError(f"{name}: prediction {pred.shape} and ground truth {gt.shape} differ")
            points = PointAnnotations.read_csv(_existing(cen_path, "centroids"), shape=gt.shape)
            if len(points) == 0:
                raise InputError(f"{name}: no expert centroids; relative count error is undefined")
            reports.append(evaluate(pred, gt, points, cfg.eval.iou_threshold, name=name))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(reports_to_json(reports))
    table = format_table(reports)
    (out / "report.txt").write_text(table)
    (out / "det_f1.csv").write_text(det_f1_csv(reports))
    log.write(out)
    print(table, end="")
    return EXIT_OK


def cmd_plan(args, cfg: PipelineConfig) -> int:
    if args.width is None or args.height is None:
        raise InputError("plan needs --width and --height")
    plan = plan_tiling(args.width, args.height, cfg.tiling.window, cfg.tiling.stride)
    text = plan.to_json()
    out = _path(args, cfg, "out", required=False)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train-rf": cmd_train_rf,
    "synth-labels": cmd_synth_labels,
    "segment": cmd_segment,
    "train-filter": cmd_train_filter,
    "evaluate": cmd_evaluate,
    "plan": cmd_plan,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuronseg",
        description="Label synthesis from point annotations, tiled neuron segmentation and scoring.",
        epilog="Exit codes: 0 ok, 2 bad input, 3 invariant violation, 4 resource guard.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def dataset_flags(p):
        p.add_argument("--dataset", help="dataset directory with manifest.json")
        p.add_argument("--scenes", help="comma-separated subset of scene names")

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--levels", help="comma-separated density levels")
    p.add_argument("--seeds", help="comma-separated scene seeds")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)

    p = sub.add_parser("train-rf", parents=[common], help="train the pixel random forest")
    dataset_flags(p)
    p.add_argument("--samples", help="training-sample CSV (read, or written when --dataset is given)")
    p.add_argument("--n-trees", type=int)

    p = sub.add_parser("synth-labels", parents=[common], help="point labels -> three-class masks")
    dataset_flags(p)
    p.add_argument("--image")
    p.add_argument("--centroids")
    p.add_argument("--rf-model")

    p = sub.add_parser("segment", parents=[common], help="tiled instance segmentation")
    dataset_flags(p)
    p.add_argument("--image")
    p.add_argument("--rf-model")
    p.add_argument("--filter-model")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--min-weight", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--memory-budget-mb", type=int)

    p = sub.add_parser("train-filter", parents=[common], help="train the predicted-IoU filter")
    dataset_flags(p)
    p.add_argument("--rf-model")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions")
    dataset_flags(p)
    p.add_argument("--pred-dir", help="directory of <scene>/labels.png predictions")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--centroids")

    p = sub.add_parser("plan", parents=[common], help="dump a tiling plan as JSON")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    return parser


def _overrides(args) -> dict:
    def csv(value, conv=str):
        return [conv(v) for v in value.split(",")] if value else None

    o = {
        "seed": args.seed,
        "tiling.window": getattr(args, "window", None),
        "tiling.stride": getattr(args, "stride", None),
        "tiling.min_weight": getattr(args, "min_weight", None),
        "tiling.workers": getattr(args, "workers", None),
        "tiling.memory_budget_mb": getattr(args, "memory_budget_mb", None),
        "rf.n_trees": getattr(args, "n_trees", None),
    }
    if args.command == "gen":
        o.update(
            {
                "gen.levels": csv(args.levels),
                "gen.seeds": csv(args.seeds, int),
                "gen.width": args.width,
                "gen.height": args.height,
            }
        )
    return o


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = apply_overrides(load_config(args.config), _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (InputError, ConfigError, TilingError, FileNotFoundError, ValueError) as exc:
        print(f"neuronseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as exc:
        print(f"neuronseg {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ResourceGuardError as exc:
        print(f"neuronseg {args.command}: resource guard: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
