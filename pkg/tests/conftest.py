import numpy as np
import pytest

from neuronseg.features_rf import ForestParams, extract_pixel_features, sample_training_pixels, train_random_forest
from neuronseg.synthgen import generate_scene, preset

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def training_scenes(size=256, seeds=(101, 102, 103, 104)):
    levels = ["sparse", "dense", "very-dense", "dense"]
    return [generate_scene(preset(lv, size, size, s)) for lv, s in zip(levels, seeds)]


def fit_forest(scenes, n_per_scene=4000, **params):
    xs, ys = [], []
    for k, s in enumerate(scenes):
        f = extract_pixel_features(s.image, 5)
        x, y = sample_training_pixels(f, s.labels > 0, n_per_scene, np.random.default_rng(k))
        xs.append(x)
        ys.append(y)
    return train_random_forest(np.concatenate(xs), np.concatenate(ys), ForestParams(**params))


@pytest.fixture(scope="session")
def small_forest():
    """A 20-tree forest trained on four small synthetic scenes."""
    return fit_forest(training_scenes(), n_trees=20, seed=3)
