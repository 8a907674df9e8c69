import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).resolve().parent
REPO_ROOT = TESTS_DIR.parent
MNIST_DIR = REPO_ROOT / "data" / "mnist"

sys.path.insert(0, str(TESTS_DIR))  # makes `oracles` importable


def mnist_paths():
    return {
        "train_images": MNIST_DIR / "train-images-idx3-ubyte.gz",
        "train_labels": MNIST_DIR / "train-labels-idx1-ubyte.gz",
        "test_images": MNIST_DIR / "t10k-images-idx3-ubyte.gz",
        "test_labels": MNIST_DIR / "t10k-labels-idx1-ubyte.gz",
    }


@pytest.fixture(scope="session")
def mnist():
    """Full MNIST train/test pair; fails loudly if the data files are gone."""
    from sparseconv import load_idx

    paths = mnist_paths()
    for name, p in paths.items():
        assert p.exists(), f"missing MNIST file {name}: {p}"
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"])
    return train, test
