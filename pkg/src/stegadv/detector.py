"""Desk-scale steganalysis-style defense: truncated-residual co-occurrence
features with a regularized linear classifier, evaluated at a fixed false
positive rate.

Residuals are first-order pixel differences scanned along four directions
(right, down, and the two diagonals), truncated to [-T, T]. Order-2
co-occurrences of consecutive residuals are pooled with the reverse scan
(bin map (a, b) -> (-b, -a)) and the two diagonal scans are pooled into one
block, which makes the feature exactly invariant to horizontal mirroring.
Channels are averaged and each block is normalized to a unit-sum histogram.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .image_core import PixelImage, read_exact

DETECTOR_MAGIC = b"STGD"
DETECTOR_VERSION = 1

_BLOCKS = ("horizontal", "vertical", "diagonal")


@dataclass
class FeatureVector:
    values: np.ndarray
    truncation: int
    order: int
    directions: tuple[str, ...]


@dataclass
class LinearDetector:
    """w . f + b scores an image; above tau means adversarial at the
    calibrated 5% false positive rate."""

    weights: np.ndarray
    bias: float
    tau: float
    seed: int
    regularization: float

    def score(self, features) -> float:
        f = features.values if isinstance(features, FeatureVector) else np.asarray(features)
        return float(f @ self.weights + self.bias)

    def score_image(self, image: PixelImage, truncation: int = 3) -> float:
        return self.score(extract_residual_features(image, truncation))


@dataclass
class DetectionReport:
    tpr: float
    fpr: float
    roc: list[tuple[float, float]]
    cover_scores: np.ndarray
    adv_scores: np.ndarray


def _pair_histogram(first: np.ndarray, second: np.ndarray, t: int) -> np.ndarray:
    """Joint histogram of residual pairs, both already truncated to [-t, t]."""
    bins = 2 * t + 1
    idx = (first.ravel() + t) * bins + (second.ravel() + t)
    return np.bincount(idx, minlength=bins * bins).reshape(bins, bins).astype(np.float64)


def _reverse_pool(hist: np.ndarray) -> np.ndarray:
    # Scanning the opposite way negates residuals and swaps pair order, so
    # the reverse-scan histogram is the (a, b) -> (-b, -a) image of this one.
    return hist + hist[::-1, ::-1].T


def extract_residual_features(
    image: PixelImage, truncation: int = 3, order: int = 2
) -> FeatureVector:
    if order != 2:
        raise ValueError("only order-2 co-occurrences are supported")
    t = int(truncation)
    if t < 1:
        raise ValueError("truncation must be >= 1")
    h, w = image.height, image.width
    if h < 3 or w < 3:
        raise ValueError("image smaller than the co-occurrence support")

    bins = 2 * t + 1
    hists = {name: np.zeros((bins, bins)) for name in _BLOCKS}
    for c in range(image.channels):
        plane = image.values[c]
        rh = np.clip(plane[:, 1:] - plane[:, :-1], -t, t)
        rv = np.clip(plane[1:, :] - plane[:-1, :], -t, t)
        rd = np.clip(plane[1:, 1:] - plane[:-1, :-1], -t, t)
        ra = np.clip(plane[1:, :-1] - plane[:-1, 1:], -t, t)
        hists["horizontal"] += _pair_histogram(rh[:, :-1], rh[:, 1:], t)
        hists["vertical"] += _pair_histogram(rv[:-1, :], rv[1:, :], t)
        hists["diagonal"] += _pair_histogram(rd[:-1, :-1], rd[1:, 1:], t)
        hists["diagonal"] += _pair_histogram(ra[:-1, 1:], ra[1:, :-1], t)

    blocks = []
    for name in _BLOCKS:
        pooled = _reverse_pool(hists[name])
        total = pooled.sum()
        if total > 0:
            pooled = pooled / total
        blocks.append(pooled.ravel())
    return FeatureVector(
        values=np.concatenate(blocks),
        truncation=t,
        order=order,
        directions=("right", "down", "down-right", "down-left"),
    )


def lower_quantile(scores: np.ndarray, q: float) -> float:
    """Lower empirical quantile: the ceil(q*n)-th order statistic, which
    keeps the realized false positive rate at or below the target."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("empty score set")
    k = max(int(np.ceil(q * s.size)), 1)
    return float(s[min(k, s.size) - 1])


def tpr_at_fpr(cover_scores, adv_scores, fpr: float = 0.05) -> float:
    """Fraction of adversarial scores above the (1 - fpr) cover quantile;
    higher score means more adversarial."""
    cover = np.asarray(cover_scores, dtype=np.float64)
    adv = np.asarray(adv_scores, dtype=np.float64)
    if cover.size == 0 or adv.size == 0:
        raise ValueError("both score sets must be nonempty")
    threshold = lower_quantile(cover, 1.0 - fpr)
    return float(np.mean(adv > threshold))


def roc_points(cover_scores, adv_scores) -> list[tuple[float, float]]:
    cover = np.asarray(cover_scores, dtype=np.float64)
    adv = np.asarray(adv_scores, dtype=np.float64)
    thresholds = np.unique(np.concatenate([cover, adv]))
    points = [(1.0, 1.0)]
    for thr in thresholds:
        points.append((float(np.mean(cover > thr)), float(np.mean(adv > thr))))
    points.append((0.0, 0.0))
    return sorted(set(points), reverse=True)


def train_detector(
    pairs,
    seed: int,
    regularization: float = 1e-3,
    iterations: int = 500,
    learning_rate: float = 2.0,
    calibration_fraction: float = 0.25,
    truncation: int = 3,
) -> LinearDetector:
    """Ridge-penalized logistic regression on (cover, adversarial) pairs.

    Full-batch gradient descent for a fixed iteration budget on standardized
    features (the affine standardization is folded back into the returned
    weights). The decision threshold is the 95th percentile of cover scores
    on a held-out calibration split, i.e. a 5% false positive rate.
    """
    pairs = list(pairs)
    if len(pairs) < 50:
        raise ValueError(f"need at least 50 pairs, got {len(pairs)}")
    feats = []
    labels = []
    for cover, adv in pairs:
        feats.append(extract_residual_features(cover, truncation).values)
        labels.append(0)
        feats.append(extract_residual_features(adv, truncation).values)
        labels.append(1)
    x = np.stack(feats)
    y = np.asarray(labels, dtype=np.float64)

    rng = np.random.default_rng(seed)
    n_pairs = len(pairs)
    n_calib = max(int(round(calibration_fraction * n_pairs)), 1)
    calib_pairs = rng.permutation(n_pairs)[:n_calib]
    calib_rows = np.zeros(x.shape[0], dtype=bool)
    calib_rows[2 * calib_pairs] = True
    calib_rows[2 * calib_pairs + 1] = True

    x_train, y_train = x[~calib_rows], y[~calib_rows]
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    if np.all(sd < 1e-12):
        raise ValueError("degenerate training set: all features identical")
    sd = np.where(sd < 1e-12, 1.0, sd)
    xs = (x_train - mu) / sd

    w = np.zeros(xs.shape[1])
    b = 0.0
    n = xs.shape[0]
    for _ in range(iterations):
        z = xs @ w + b
        prob = 1.0 / (1.0 + np.exp(-z))
        err = (prob - y_train) / n
        grad_w = xs.T @ err + regularization * w
        grad_b = float(err.sum())
        w -= learning_rate * grad_w
        b -= learning_rate * grad_b

    # Fold the standardization into raw-feature weights.
    w_raw = w / sd
    b_raw = b - float(mu @ w_raw)

    cover_calib = x[calib_rows & (np.arange(x.shape[0]) % 2 == 0)]
    tau = lower_quantile(cover_calib @ w_raw + b_raw, 0.95)
    return LinearDetector(
        weights=w_raw, bias=b_raw, tau=tau, seed=seed, regularization=regularization
    )


def evaluate_detector(
    detector: LinearDetector, covers, advs, fpr: float = 0.05, truncation: int = 3
) -> DetectionReport:
    cover_scores = np.array([detector.score_image(im, truncation) for im in covers])
    adv_scores = np.array([detector.score_image(im, truncation) for im in advs])
    return DetectionReport(
        tpr=tpr_at_fpr(cover_scores, adv_scores, fpr),
        fpr=fpr,
        roc=roc_points(cover_scores, adv_scores),
        cover_scores=cover_scores,
        adv_scores=adv_scores,
    )


def save_detector(detector: LinearDetector, path) -> None:
    dim = detector.weights.shape[0]
    with open(path, "wb") as f:
        f.write(DETECTOR_MAGIC + struct.pack("<BI", DETECTOR_VERSION, dim))
        f.write(np.asarray(detector.weights, dtype="<f8").tobytes())
        f.write(struct.pack("<ddqd", detector.bias, detector.tau,
                            detector.seed, detector.regularization))


def load_detector(path) -> LinearDetector:
    with open(path, "rb") as f:
        magic = read_exact(f, 4)
        if magic != DETECTOR_MAGIC:
            raise ValueError(f"bad detector magic {magic!r}")
        version, dim = struct.unpack("<BI", read_exact(f, 5))
        if version != DETECTOR_VERSION:
            raise ValueError(f"unsupported detector version {version}")
        weights = np.frombuffer(read_exact(f, 8 * dim), dtype="<f8").astype(np.float64)
        bias, tau, seed, reg = struct.unpack("<ddqd", read_exact(f, 32))
    return LinearDetector(weights=weights, bias=bias, tau=tau, seed=int(seed),
                          regularization=reg)
