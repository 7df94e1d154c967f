"""Image value types, the model-domain mapping and its inverse, perturbation
arithmetic, and the on-disk formats shared by every other module.

Layout convention used everywhere: a (channels, height, width) array in C
order. The flat index of pixel (c, r, col) is ``(c * height + r) * width +
col``, and cost tables, gradients and move fields all index pixels this way.
Integer images live in {0..255}; all arithmetic is done in float64 and images
are stored as 8-bit only at rest (PNG), continuous data as 32-bit floats
(raw tensor files).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"STGA"
TENSOR_VERSION = 1

ROUND_TRIP_TOL = 1e-6


def _as_chw(values: np.ndarray) -> np.ndarray:
    a = np.asarray(values)
    if a.ndim == 2:
        a = a[np.newaxis, :, :]
    if a.ndim != 3:
        raise ValueError(f"expected a (C, H, W) array, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"dimensions must be strictly positive, got {a.shape}")
    return a


@dataclass
class PixelImage:
    """Integer image with every value in {0..255}, laid out (C, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        a = _as_chw(self.values)
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(a == np.round(a)):
                raise ValueError("PixelImage requires integer values")
        a = a.astype(np.int64)
        if a.min() < 0 or a.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        self.values = a

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class ContinuousImage:
    """Real-valued image, either in the model domain or in pixel units.

    ``domain`` is "model" (values inside the normalization's range) or
    "pixel" (values in [0, 255], not necessarily integers).
    """

    values: np.ndarray
    domain: str

    def __post_init__(self):
        self.values = _as_chw(self.values).astype(np.float64)
        if self.domain not in ("model", "pixel"):
            raise ValueError(f"unknown domain tag {self.domain!r}")
        if self.domain == "pixel":
            lo, hi = self.values.min(), self.values.max()
            if lo < -1e-9 or hi > 255 + 1e-9:
                raise ValueError(f"pixel-domain values outside [0, 255]: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class NormalizationSpec:
    """Per-channel affine pre-processing x = (pixel/255 - offset) / scale."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.offset = np.atleast_1d(np.asarray(self.offset, dtype=np.float64))
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if self.offset.shape != self.scale.shape:
            raise ValueError("offset and scale must have the same length")
        if np.any(self.scale == 0):
            raise ValueError("scale must be nonzero")

    @classmethod
    def divide_by_255(cls, channels: int = 1) -> "NormalizationSpec":
        return cls(np.zeros(channels), np.ones(channels))

    def per_channel(self, channels: int) -> tuple[np.ndarray, np.ndarray]:
        """Broadcast offset/scale to ``channels`` entries."""
        if self.offset.size == channels:
            return self.offset, self.scale
        if self.offset.size == 1:
            return (np.full(channels, self.offset[0]), np.full(channels, self.scale[0]))
        raise ValueError(
            f"normalization has {self.offset.size} channels, image has {channels}"
        )


def to_model_domain(image: PixelImage | ContinuousImage, spec: NormalizationSpec) -> ContinuousImage:
    """Map a pixel-domain image to the classifier's input domain."""
    if isinstance(image, ContinuousImage) and image.domain != "pixel":
        raise ValueError("input must be in the pixel domain")
    vals = image.values.astype(np.float64)
    off, sc = spec.per_channel(vals.shape[0])
    x = (vals / 255.0 - off[:, None, None]) / sc[:, None, None]
    return ContinuousImage(x, "model")


def from_model_domain(x: ContinuousImage, spec: NormalizationSpec) -> tuple[ContinuousImage, bool]:
    """Invert the pre-processing map; clamps to [0, 255] and reports whether
    clamping occurred (attacks may momentarily overshoot the pixel cube)."""
    if x.domain != "model":
        raise ValueError("input must be in the model domain")
    off, sc = spec.per_channel(x.shape[0])
    pix = 255.0 * (x.values * sc[:, None, None] + off[:, None, None])
    clamped = bool(pix.min() < 0.0 or pix.max() > 255.0)
    pix = np.clip(pix, 0.0, 255.0)
    return ContinuousImage(pix, "pixel"), clamped


def _raw_values(image) -> np.ndarray:
    if isinstance(image, (PixelImage, ContinuousImage)):
        return image.values
    return _as_chw(np.asarray(image))


def l2_distortion(a, b) -> float:
    """Euclidean norm of the value-wise difference, in pixel units."""
    va, vb = _raw_values(a), _raw_values(b)
    if va.shape != vb.shape:
        raise ValueError(f"shape mismatch: {va.shape} vs {vb.shape}")
    if isinstance(a, ContinuousImage) and isinstance(b, ContinuousImage):
        if a.domain != b.domain:
            raise ValueError("images live in different domains")
    d = va.astype(np.float64) - vb.astype(np.float64)
    return float(np.sqrt(np.sum(d * d)))


def perturbation(attacked: ContinuousImage, original: PixelImage) -> np.ndarray:
    """Continuous perturbation p = I_a - I_o in pixel units."""
    if attacked.domain != "pixel":
        raise ValueError("attacked image must be in the pixel domain")
    if attacked.shape != original.shape:
        raise ValueError(f"shape mismatch: {attacked.shape} vs {original.shape}")
    return attacked.values - original.values.astype(np.float64)


def apply_moves(original: PixelImage, moves: np.ndarray) -> PixelImage:
    """I_o + modification field; raises if any value leaves [0, 255]."""
    moves = np.asarray(moves)
    if moves.shape != original.shape:
        raise ValueError(f"shape mismatch: {moves.shape} vs {original.shape}")
    if not np.issubdtype(moves.dtype, np.integer):
        raise ValueError("move field must be integer")
    return PixelImage(original.values + moves.astype(np.int64))


# ---------------------------------------------------------------------------
# Raw tensor files: b"STGA", version byte, u32 LE (C, H, W), f32 LE payload.
# ---------------------------------------------------------------------------

def read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ValueError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
        buf += chunk
    return buf


def tensor_to_bytes(values: np.ndarray) -> bytes:
    a = _as_chw(np.asarray(values, dtype=np.float64))
    c, h, w = a.shape
    header = TENSOR_MAGIC + struct.pack("<BIII", TENSOR_VERSION, c, h, w)
    return header + a.astype("<f4").tobytes(order="C")


def tensor_from_stream(stream) -> np.ndarray:
    magic = read_exact(stream, 4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, c, h, w = struct.unpack("<BIII", read_exact(stream, 13))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    count = c * h * w
    if count == 0 or count > 1 << 28:
        raise ValueError(f"implausible tensor dims ({c}, {h}, {w})")
    payload = read_exact(stream, 4 * count)
    a = np.frombuffer(payload, dtype="<f4", count=count)
    return a.astype(np.float64).reshape(c, h, w)


def write_tensor(path, values: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(values))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_stream(f)


# ---------------------------------------------------------------------------
# PNG at rest (8-bit RGB or grayscale only).
# ---------------------------------------------------------------------------

def write_png(image: PixelImage, path) -> None:
    a = image.values.astype(np.uint8)
    if image.channels == 1:
        Image.fromarray(a[0], mode="L").save(path, format="PNG")
    elif image.channels == 3:
        Image.fromarray(np.transpose(a, (1, 2, 0)), mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported channel count {image.channels}")


def read_png(path) -> PixelImage:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            raise ValueError(f"unsupported PNG mode {im.mode!r} (need 8-bit L or RGB)")
        a = np.asarray(im)
    if a.ndim == 2:
        return PixelImage(a[np.newaxis, :, :])
    return PixelImage(np.transpose(a, (2, 0, 1)))
