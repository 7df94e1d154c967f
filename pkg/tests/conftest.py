import numpy as np
import pytest

from stegadv.classifier import ToyClassifier, ToyParams, train_toy
from stegadv.harness import DatasetSpec, generate_synthetic_dataset
from stegadv.image_core import NormalizationSpec, PixelImage


def random_pixel_image(rng, channels=3, height=16, width=16) -> PixelImage:
    return PixelImage(rng.integers(0, 256, size=(channels, height, width)))


def random_toy_classifier(rng, shape=(3, 8, 8), hidden=16, k=3) -> ToyClassifier:
    n_in = int(np.prod(shape))
    params = ToyParams(
        w1=rng.normal(0, 1.0 / np.sqrt(n_in), (n_in, hidden)),
        b1=rng.normal(0, 0.1, hidden),
        w2=rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, k)),
        b2=rng.normal(0, 0.1, k),
        input_shape=shape,
        norm=NormalizationSpec.divide_by_255(shape[0]),
    )
    return ToyClassifier(params)


@pytest.fixture(scope="session")
def blob_dataset():
    """Bright vs dark 16x16 grayscale blobs; linearly separable."""
    rng = np.random.default_rng(1234)
    images, labels = [], []
    for i in range(200):
        label = i % 2
        mean = 70 if label == 0 else 180
        vals = np.clip(rng.normal(mean, 25, size=(1, 16, 16)), 0, 255)
        images.append(PixelImage(np.round(vals).astype(np.int64)))
        labels.append(label)
    return images, np.array(labels)


@pytest.fixture(scope="session")
def blob_classifier(blob_dataset):
    images, labels = blob_dataset
    clf, acc = train_toy(images, labels, seed=99, epochs=120, learning_rate=0.05, hidden=32)
    assert acc >= 0.95
    return clf


@pytest.fixture(scope="session")
def textured_dataset():
    """Small color corpus from the synthetic generator."""
    spec = DatasetSpec(classes=2, train=120, test=60, height=16, width=16, channels=3)
    images, labels = generate_synthetic_dataset(spec, seed=5)
    return spec, images, labels


@pytest.fixture(scope="session")
def textured_classifier(textured_dataset):
    spec, images, labels = textured_dataset
    clf, acc = train_toy(
        images[: spec.train],
        labels[: spec.train],
        seed=3,
        epochs=120,
        learning_rate=0.05,
        hidden=32,
    )
    assert acc >= 0.9
    return clf
