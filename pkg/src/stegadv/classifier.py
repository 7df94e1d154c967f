"""Differentiable K-class classifier abstraction with a built-in toy network.

The toy network is one tanh hidden layer plus softmax, small enough for
desk-scale experiments but smooth everywhere so analytic gradients exist.
The adversarial loss of an image against an (origin, adversarial) class pair
is the log-probability margin log p_co - log p_ca, which reduces to the
logit margin and is therefore computed without any exp/log instability.
Gradients are always returned in pixel units: the chain rule through the
pre-processing map is applied inside this module so the quantizer can mix
gradients with integer pixel moves directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .image_core import (
    ContinuousImage,
    NormalizationSpec,
    PixelImage,
    read_exact,
    to_model_domain,
)

PARAMS_MAGIC = b"STGW"
PARAMS_VERSION = 1


@dataclass
class ClassifierOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: int


@dataclass
class AdversarialLossValue:
    value: float
    origin_class: int
    adversarial_class: int


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class ToyParams:
    w1: np.ndarray  # (n_in, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, K)
    b2: np.ndarray  # (K,)
    input_shape: tuple[int, int, int]
    norm: NormalizationSpec


class ToyClassifier:
    """One hidden tanh layer, softmax output, analytic backprop."""

    def __init__(self, params: ToyParams):
        self.params = params

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.params.input_shape

    @property
    def num_classes(self) -> int:
        return self.params.b2.shape[0]

    @property
    def norm(self) -> NormalizationSpec:
        return self.params.norm

    def _check_shape(self, shape):
        if tuple(shape) != tuple(self.input_shape):
            raise ValueError(f"classifier expects {self.input_shape}, got {tuple(shape)}")

    def _forward(self, x_flat: np.ndarray):
        p = self.params
        z1 = x_flat @ p.w1 + p.b1
        a1 = np.tanh(z1)
        logits = a1 @ p.w2 + p.b2
        return a1, logits

    def predict(self, x: ContinuousImage) -> ClassifierOutput:
        """Eq.-style prediction: softmax over logits, argmax class with the
        lowest index winning ties."""
        if x.domain != "model":
            raise ValueError("predict expects a model-domain image")
        self._check_shape(x.shape)
        _, logits = self._forward(x.values.ravel())
        probs = softmax(logits)
        return ClassifierOutput(logits, probs, int(np.argmax(probs)))

    def predict_pixel(self, image: PixelImage | ContinuousImage) -> ClassifierOutput:
        return self.predict(to_model_domain(image, self.norm))

    def _validate_classes(self, c_o: int, c_a: int):
        k = self.num_classes
        if not (0 <= c_o < k and 0 <= c_a < k):
            raise ValueError(f"class indices must lie in [0, {k})")
        if c_o == c_a:
            raise ValueError("origin and adversarial class must differ")

    def adversarial_loss(
        self, image: PixelImage | ContinuousImage, c_o: int, c_a: int
    ) -> AdversarialLossValue:
        """log p_co - log p_ca, negative exactly when c_a beats c_o."""
        self._validate_classes(c_o, c_a)
        out = self.predict_pixel(image)
        return AdversarialLossValue(float(out.logits[c_o] - out.logits[c_a]), c_o, c_a)

    def loss_gradient(
        self, image: PixelImage | ContinuousImage, c_o: int, c_a: int
    ) -> tuple[AdversarialLossValue, np.ndarray]:
        """Loss and its exact gradient w.r.t. pixel-domain values.

        The softmax normalizer cancels in the margin, so dL/dlogits is just
        the one-hot difference e_co - e_ca.
        """
        self._validate_classes(c_o, c_a)
        x = to_model_domain(image, self.norm)
        self._check_shape(x.shape)
        p = self.params
        x_flat = x.values.ravel()
        a1, logits = self._forward(x_flat)
        loss = AdversarialLossValue(float(logits[c_o] - logits[c_a]), c_o, c_a)
        dh = p.w2[:, c_o] - p.w2[:, c_a]
        dz1 = dh * (1.0 - a1 * a1)
        dx = p.w1 @ dz1
        grad_model = dx.reshape(self.input_shape)
        _, sc = self.norm.per_channel(self.input_shape[0])
        grad_pixel = grad_model / (255.0 * sc[:, None, None])
        return loss, grad_pixel


def _stack_dataset(images, norm: NormalizationSpec) -> np.ndarray:
    rows = [to_model_domain(im, norm).values.ravel() for im in images]
    return np.stack(rows)


def train_toy(
    images,
    labels,
    seed: int,
    epochs: int = 150,
    learning_rate: float = 0.05,
    hidden: int = 64,
    num_classes: int | None = None,
    momentum: float = 0.9,
    norm: NormalizationSpec | None = None,
) -> tuple[ToyClassifier, float]:
    """Train the toy network with full-batch gradient descent plus momentum.

    Deterministic given the seed. Returns the classifier and its final
    training accuracy.
    """
    images = list(images)
    if not images:
        raise ValueError("empty training set")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != len(images):
        raise ValueError("label count does not match image count")
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shape = images[0].shape
    norm = norm or NormalizationSpec.divide_by_255(shape[0])
    x = _stack_dataset(images, norm)
    n, n_in = x.shape
    y = np.zeros((n, k))
    y[np.arange(n), labels] = 1.0

    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, k))
    b2 = np.zeros(k)
    vel = [np.zeros_like(a) for a in (w1, b1, w2, b2)]

    for _ in range(epochs):
        z1 = x @ w1 + b1
        a1 = np.tanh(z1)
        logits = a1 @ w2 + b2
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        dlogits = (probs - y) / n
        dw2 = a1.T @ dlogits
        db2 = dlogits.sum(axis=0)
        da1 = dlogits @ w2.T
        dz1 = da1 * (1.0 - a1 * a1)
        dw1 = x.T @ dz1
        db1 = dz1.sum(axis=0)
        for v, param, grad in zip(vel, (w1, b1, w2, b2), (dw1, db1, dw2, db2)):
            v *= momentum
            v -= learning_rate * grad
            param += v

    params = ToyParams(w1, b1, w2, b2, tuple(shape), norm)
    clf = ToyClassifier(params)
    logits = np.tanh(x @ w1 + b1) @ w2 + b2
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return clf, accuracy


# ---------------------------------------------------------------------------
# Persistence: b"STGW", version, dims, then f32 parameters.
# ---------------------------------------------------------------------------

def save_classifier(clf: ToyClassifier, path) -> None:
    p = clf.params
    c, h, w = p.input_shape
    hid = p.b1.shape[0]
    k = p.b2.shape[0]
    off, sc = p.norm.per_channel(c)
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC + struct.pack("<BIIIII", PARAMS_VERSION, c, h, w, hid, k))
        for arr in (off, sc, p.w1, p.b1, p.w2, p.b2):
            f.write(np.asarray(arr, dtype="<f4").tobytes(order="C"))


def load_classifier(path) -> ToyClassifier:
    with open(path, "rb") as f:
        magic = read_exact(f, 4)
        if magic != PARAMS_MAGIC:
            raise ValueError(f"bad classifier magic {magic!r}")
        version, c, h, w, hid, k = struct.unpack("<BIIIII", read_exact(f, 21))
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported classifier version {version}")
        n_in = c * h * w

        def block(count, shape):
            raw = read_exact(f, 4 * count)
            return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64).reshape(shape)

        off = block(c, (c,))
        sc = block(c, (c,))
        w1 = block(n_in * hid, (n_in, hid))
        b1 = block(hid, (hid,))
        w2 = block(hid * k, (hid, k))
        b2 = block(k, (k,))
    params = ToyParams(w1, b1, w2, b2, (c, h, w), NormalizationSpec(off, sc))
    return ToyClassifier(params)
