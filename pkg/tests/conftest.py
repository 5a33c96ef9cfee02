"""Shared fixtures: a deterministic MNIST-shaped classification corpus.

Ten fixed glyph templates (random solid strokes per class) are jittered by
small translations and pixel noise, then written through the real IDX
encoder so every test exercises the production loading path. Shapes and
filenames mirror the MNIST distribution.
"""

import numpy as np
import pytest

from qdgrad.data import Dataset, load_idx, write_idx_images, write_idx_labels

N_IMAGES = 7000
N_VALID = 1000


def _glyph(digit):
    rng = np.random.default_rng(1000 + digit)
    t = np.zeros((28, 28))
    for _ in range(4):
        r, c = rng.integers(2, 18, size=2)
        h, w = rng.integers(5, 10, size=2)
        t[r : r + h, c : c + w] = 1.0
    return t


@pytest.fixture(scope="session")
def mnist_like_dir(tmp_path_factory):
    rng = np.random.default_rng(42)
    labels = rng.integers(0, 10, size=N_IMAGES)
    glyphs = np.stack([_glyph(d) for d in range(10)])
    shifts = rng.integers(-3, 4, size=(N_IMAGES, 2))
    images = np.empty((N_IMAGES, 28, 28))
    for i in range(N_IMAGES):
        images[i] = np.roll(glyphs[labels[i]], tuple(shifts[i]), axis=(0, 1))
    images = images * 180.0 + rng.normal(0.0, 18.0, size=images.shape)
    images = np.clip(images, 0.0, 255.0).astype(np.uint8)
    d = tmp_path_factory.mktemp("mnist_like")
    write_idx_images(d / "train-images-idx3-ubyte", images)
    write_idx_labels(d / "train-labels-idx1-ubyte", labels.astype(np.uint8))
    return d


@pytest.fixture(scope="session")
def mnist_like(mnist_like_dir):
    return load_idx(
        mnist_like_dir / "train-images-idx3-ubyte",
        mnist_like_dir / "train-labels-idx1-ubyte",
        n_valid=N_VALID,
    )


@pytest.fixture(scope="session")
def subset_of(mnist_like):
    """Factory for prefix subsets: subset_of(n_train, n_valid) -> Dataset."""

    def make(n_train, n_valid=0):
        n = n_train + n_valid
        assert n <= len(mnist_like)
        return Dataset(
            mnist_like.features[:n], mnist_like.targets[:n], "class", 10,
            np.arange(n_train), np.arange(n_train, n),
        )

    return make
