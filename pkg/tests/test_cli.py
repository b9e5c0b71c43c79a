import json
import logging

import numpy as np
import pytest

from neuronseg.cli import main
from neuronseg.config import ConfigError, PipelineConfig, apply_overrides, dump_toml, load_config
from neuronseg.features_rf import ForestModel
from neuronseg.instance import baseline_class_maps, instances_from_three_class
from neuronseg.labelsynth import PointAnnotations
from neuronseg.metrics import evaluate
from neuronseg.pipeline import InvariantError, check_three_class, load_rgb, segment_image
from neuronseg.raster import PixelClass, read_image, read_labels, write_png
from neuronseg.synthgen import generate_scene, preset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A two-scene dataset and a small forest built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", d / "data", "--levels", "sparse,dense", "--seeds", "0",
               "--width", 128, "--height", 128) == 0
    assert run("train-rf", "--dataset", d / "data", "--n-trees", 10, "--out", d / "rf.json",
               "--samples", d / "samples.csv") == 0
    return d


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 3\n[tiling]\nwindow = 256\nstride = 200\n")
    cfg = load_config(p)
    assert (cfg.seed, cfg.tiling.window, cfg.tiling.stride) == (3, 256, 200)
    cfg = apply_overrides(cfg, {"tiling.stride": 128, "seed": None})
    assert (cfg.seed, cfg.tiling.stride) == (3, 128)
    p.write_text(dump_toml(cfg))
    assert load_config(p).digest() == cfg.digest()


@pytest.mark.parametrize("text", ["[tiling]\nwindw = 3\n", "[nope]\n", "[rf]\nn_trees = \"many\"\n",
                                  "[tiling]\nstride = 2000\n", "[gen]\nlevels = [\"medium\"]\n"])
def test_bad_config_rejected(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)
    assert run("plan", "--config", p, "--width", 10, "--height", 10) == 2


def test_dataset_layout(workdir):
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert [s["scene"] for s in manifest["scenes"]] == ["scene_0", "scene_1"]
    assert (workdir / "samples.csv").read_text().startswith("h,s,v,local_intensity,label")
    assert ForestModel.load(workdir / "rf.json").n_trees == 10
    log = json.loads((workdir / "run_log.json").read_text())
    assert {"config_sha256", "numpy", "timings_s"} <= set(log)


def test_train_rf_from_samples(workdir, tmp_path):
    assert run("train-rf", "--samples", workdir / "samples.csv", "--n-trees", 3, "--out", tmp_path / "rf.json") == 0
    assert ForestModel.load(tmp_path / "rf.json").n_trees == 3


def test_synth_labels_outputs_pass_invariants(workdir):
    out = workdir / "synth"
    assert run("synth-labels", "--dataset", workdir / "data", "--rf-model", workdir / "rf.json", "--out", out) == 0
    for scene in ("scene_0", "scene_1"):
        inst = read_labels(out / scene / "instances.png")
        three = read_image(out / scene / "three_class.png")
        check_three_class(inst, three)
        assert read_image(out / scene / "overlay.png").shape == (128, 128, 3)
        pts = PointAnnotations.read_csv(workdir / "data" / scene / "centroids.csv")
        assert set(np.unique(inst[inst > 0])) <= set(pts.ids.tolist())


def test_invariant_checker_catches_bad_mask():
    inst = np.zeros((4, 4), np.uint32)
    inst[1:3, 1:3] = 1
    three = np.zeros((4, 4), np.uint8)
    with pytest.raises(InvariantError):
        check_three_class(inst, three)


def test_empty_centroids_give_background(workdir, tmp_path, caplog):
    (tmp_path / "c.csv").write_text("id,x,y\n")
    with caplog.at_level(logging.WARNING):
        code = run("synth-labels", "--image", workdir / "data" / "scene_0" / "image.png",
                   "--centroids", tmp_path / "c.csv", "--rf-model", workdir / "rf.json", "--out", tmp_path / "o")
    assert code == 0
    assert (read_image(tmp_path / "o" / "three_class.png") == PixelClass.BACKGROUND).all()
    assert "no seeds" in caplog.text


def test_filter_segment_evaluate_chain(workdir):
    d = workdir
    assert run("train-filter", "--dataset", d / "data", "--rf-model", d / "rf.json", "--out", d / "gbt.json",
               "--window", 96, "--stride", 64) == 0
    assert (d / "gbt.csv").exists()
    assert run("segment", "--dataset", d / "data", "--rf-model", d / "rf.json", "--filter-model", d / "gbt.json",
               "--window", 96, "--stride", 64, "--out", d / "pred") == 0
    plan = json.loads((d / "pred" / "scene_0" / "plan.json").read_text())
    assert plan["n_tiles"] == 4 and plan["overlap"] == 32
    cands = json.loads((d / "pred" / "scene_0" / "candidates.json").read_text())
    assert all(c["score"] >= 0.3 for c in cands["candidates"])
    assert run("evaluate", "--dataset", d / "data", "--pred-dir", d / "pred", "--out", d / "eval") == 0
    report = json.loads((d / "eval" / "report.json").read_text())
    for img in report["images"]:
        scene = d / "data" / img["name"]
        direct = evaluate(read_labels(d / "pred" / img["name"] / "labels.png"), read_labels(scene / "labels.png"),
                          PointAnnotations.read_csv(scene / "centroids.csv"))
        assert img["det_f1"] == direct.det.f1 and img["seg_f1"] == direct.seg.f1
        assert img["dice"] == direct.dice and img["rce"] == direct.rce
    header = (d / "eval" / "report.txt").read_text().splitlines()[0].split()
    assert header == ["image", "det-F1", "seg-F1", "Dice", "RCE"]
    assert (d / "eval" / "det_f1.csv").read_text().startswith("image,det_f1\nscene_0,")


def test_evaluate_prediction_equal_to_truth(workdir, tmp_path):
    scene = workdir / "data" / "scene_1"
    assert run("evaluate", "--pred", scene / "labels.png", "--gt", scene / "labels.png",
               "--centroids", scene / "centroids.csv", "--out", tmp_path) == 0
    (img,) = json.loads((tmp_path / "report.json").read_text())["images"]
    assert (img["det_f1"], img["seg_f1"], img["dice"], img["rce"]) == (1.0, 1.0, 1.0, 0.0)


def test_evaluate_without_expert_centroids_is_input_error(workdir, tmp_path):
    scene = workdir / "data" / "scene_1"
    (tmp_path / "c.csv").write_text("id,x,y\n")
    assert run("evaluate", "--pred", scene / "labels.png", "--gt", scene / "labels.png",
               "--centroids", tmp_path / "c.csv", "--out", tmp_path / "e") == 2


def test_single_tile_equals_untiled(workdir, tmp_path):
    image_path = workdir / "data" / "scene_1" / "image.png"
    assert run("segment", "--image", image_path, "--rf-model", workdir / "rf.json",
               "--window", 128, "--stride", 128, "--out", tmp_path) == 0
    rf = ForestModel.load(workdir / "rf.json")
    image = load_rgb(image_path)
    untiled = instances_from_three_class(baseline_class_maps(image, rf), 0.5, 20)
    assert (read_labels(tmp_path / "labels.png") == untiled.labels).all()


def test_missing_inputs_exit_2(workdir, tmp_path):
    assert run("segment", "--image", tmp_path / "none.png", "--rf-model", workdir / "rf.json", "--out", tmp_path) == 2
    assert run("segment", "--image", workdir / "data" / "scene_0" / "image.png", "--out", tmp_path) == 2
    assert run("plan", "--width", 100) == 2
    assert run("plan", "--width", 100, "--height", 100, "--window", 200) == 2


def test_memory_guard_exit_4(workdir, tmp_path):
    assert run("segment", "--image", workdir / "data" / "scene_0" / "image.png", "--rf-model", workdir / "rf.json",
               "--memory-budget-mb", 1, "--out", tmp_path) == 4


def test_inputs_not_mutated(workdir, tmp_path):
    before = (workdir / "data" / "scene_0" / "image.png").read_bytes()
    run("segment", "--image", workdir / "data" / "scene_0" / "image.png", "--rf-model", workdir / "rf.json",
        "--window", 100, "--stride", 80, "--out", tmp_path)
    assert (workdir / "data" / "scene_0" / "image.png").read_bytes() == before


def test_plan_json(tmp_path, capsys):
    assert run("plan", "--width", 5000, "--height", 5000) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["n_tiles"] == 16 and plan["overlap"] == 120
    assert plan["positions"][-1] == [3660, 3660]
    assert run("plan", "--width", 5001, "--height", 300, "--window", 300, "--stride", 250, "--out", tmp_path / "p.json") == 0
    assert json.loads((tmp_path / "p.json").read_text())["positions"][-1] == [4701, 0]


@pytest.mark.slow
def test_full_size_scene_uses_sixteen_tiles(tmp_path, caplog, small_forest):
    scene = generate_scene(preset("sparse", 5000, 5000, seed=1))
    write_png(tmp_path / "big.png", scene.image)
    small_forest.save(tmp_path / "rf.json")
    del scene
    with caplog.at_level(logging.INFO, logger="neuronseg"):
        assert run("segment", "--image", tmp_path / "big.png", "--rf-model", tmp_path / "rf.json",
                   "--out", tmp_path / "out", "-v") == 0
    assert "processed 16 tiles" in caplog.text
    log = json.loads((tmp_path / "out" / "run_log.json").read_text())
    assert log["tiles"] == {"image": 16}


def test_worker_pool_matches_sequential(workdir):
    rf = ForestModel.load(workdir / "rf.json")
    image = load_rgb(workdir / "data" / "scene_1" / "image.png")
    base = apply_overrides(PipelineConfig(), {"tiling.window": 80, "tiling.stride": 60})
    one = segment_image(image, rf, base)
    two = segment_image(image, rf, apply_overrides(base, {"tiling.workers": 2}))
    assert one.plan.n_tiles == 4
    assert (one.maps.stack() == two.maps.stack()).all()
    assert (one.candidates.labels == two.candidates.labels).all()
