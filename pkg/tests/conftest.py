import numpy as np
import pytest
from hypothesis import settings

from meds.dataio import FeatureDataset, SynthSpec, generate_synthetic_dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA = {}


def record(number, title, passed, detail=""):
    CRITERIA[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}  {detail}")


def random_dataset(rng, n=6, grid=(3, 3, 4), classes=1, truth=True):
    H, W, _ = grid
    feats = rng.standard_normal((n, *grid)).astype(np.float32).astype(np.float64)
    cls = np.arange(n) % classes
    labels = masks = None
    if truth:
        labels = (rng.random(n) < 0.5).astype(np.uint8)
        masks = np.zeros((n, H, W), np.uint8)
        for i in np.flatnonzero(labels):
            masks[i, rng.integers(H), rng.integers(W)] = 1
    return FeatureDataset(feats, cls, labels, masks)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic_dataset(SynthSpec(classes=2, images_per_class=30, height=4, width=4,
                                                channels=4, seed=3))
