import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from jsdlab.diffusion import ScoreModel, TrainConfig, ancestral_sample, train
from jsdlab.schedule import linear_schedule
from jsdlab.toy_data import GaussianMixture, sample

CACHE = Path(__file__).parent / ".cache"
SRC = Path(__file__).parents[1] / "src" / "jsdlab"

# Full training settings for the toy model.
FULL_TRAIN = dict(epochs=1000, batch_size=128, base_lr=1e-3, null_dropout=0.1, seed=0)
DATASET = dict(n=8000, seed=0)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def sched():
    return linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def mixture():
    return GaussianMixture()


def _cache_key():
    h = hashlib.sha256(json.dumps([FULL_TRAIN, DATASET], sort_keys=True).encode())
    for name in ("nn.py", "diffusion.py", "schedule.py", "toy_data.py"):
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(sched, mixture):
    """The toy model trained with the full settings, cached across sessions.

    The cache key covers the training code, so edits to it retrain.
    Set JSDLAB_RETRAIN=1 to force a fresh run.
    """
    CACHE.mkdir(exist_ok=True)
    path = CACHE / f"model-{_cache_key()}.npz"
    if path.exists() and not os.environ.get("JSDLAB_RETRAIN"):
        model, meta = ScoreModel.load(path)
        return model, meta["losses"]
    points, labels = sample(mixture, DATASET["n"], np.random.default_rng(DATASET["seed"]))
    model = ScoreModel.create(sched.T, seed=0)
    result = train(model, points, labels, sched, TrainConfig(**FULL_TRAIN))
    model.save(path, {"schedule": sched.params(), "train_config": FULL_TRAIN, "losses": result.losses})
    return model, result.losses


@pytest.fixture(scope="session")
def model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def uncond_samples(model, sched):
    return ancestral_sample(model, sched, 2000, None, np.random.default_rng(100))


@pytest.fixture(scope="session")
def cond_samples(model, sched):
    """500 draws per class, returned with their conditioning labels."""
    labels = np.repeat(np.arange(8), 500)
    return ancestral_sample(model, sched, len(labels), labels, np.random.default_rng(101)), labels


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
