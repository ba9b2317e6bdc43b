from pathlib import Path

import numpy as np
import pytest
import torch

from gtn.data import Dataset, Splits, normalize, prepare
from gtn.learners import LearnerSpec
from gtn.nn import LayerSpec

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"


def synthetic_splits(n_train=256, n_val=64, n_test=64, seed=0, kind="mnist"):
    """Random images whose class is encoded in the mean brightness of a quadrant."""
    rng = np.random.default_rng(seed)
    shape = (1, 28, 28) if kind == "mnist" else (3, 32, 32)

    def make(n, split):
        labels = np.arange(n) % 10
        images = rng.normal(size=(n, *shape)).astype(np.float32)
        images[:, :, :8, :8] += labels[:, None, None, None] * 0.5
        return Dataset(images, labels, split, kind)

    train = normalize(make(n_train, "train"))
    return Splits(train, normalize(make(n_val, "val"), train.mean, train.std),
                  normalize(make(n_test, "test"), train.mean, train.std))


@pytest.fixture(scope="session")
def tiny_splits():
    return synthetic_splits()


@pytest.fixture(scope="session")
def mnist_splits():
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST files not present")
    return prepare("mnist", MNIST_DIR, 0)


def width4_spec(seed=0):
    """mnist-proxy layout with every hidden width fixed to 4."""
    block = [LayerSpec("conv", 4), LayerSpec("batchnorm"), LayerSpec("activation"),
             LayerSpec("maxpool", kernel=2, stride=2)]
    layers = block + block + [LayerSpec("flatten"), LayerSpec("fc", 4), LayerSpec("batchnorm"),
                              LayerSpec("activation"), LayerSpec("fc", 10)]
    return LearnerSpec("mnist-proxy", tuple(layers), seed)


def max_rel_diff(a, b):
    return max(((a[k] - b[k]).abs().max() / (b[k].abs().max() + 1e-12)).item() for k in b)


torch.set_num_threads(1)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
