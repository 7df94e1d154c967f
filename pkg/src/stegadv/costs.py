"""Steganographic cost models and the additive distortion they induce.

Three cost families are provided. HILL builds an empirical unit-cost map
from one high-pass and two averaging filters; the quadratic model prices a
move of l quanta at l^2 / sigma_i^2 with a per-pixel variance estimated by
Wiener filtering followed by a least-squares fit on low-frequency cosine
atoms; the lattice discount (CMD strategy) divides by 9 the cost of moves
whose sign agrees with the modifications already committed in the 3x3
cross-channel neighborhood.

All convolutions use edge-duplicating mirror padding so borders never look
artificially cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from .image_core import PixelImage

if TYPE_CHECKING:  # pragma: no cover
    from .quantizer import AdmissibleRanges

# Division guard for the HILL inversion and the wet-pixel cost cap.
HILL_EPS = 1e-10
COST_CAP = 1e13

# 3x3 KB high-pass used by HILL.
KB_KERNEL = np.array(
    [[-1.0, 2.0, -1.0],
     [2.0, -4.0, 2.0],
     [-1.0, 2.0, -1.0]]
)


@dataclass
class CostTable:
    """Per-pixel admissible moves and their costs.

    ``costs[r, i]`` is the cost of moving pixel i by ``lo[i] + r`` quanta for
    ``r < size[i]``; rows beyond a truncated range are padded with +inf so a
    column-wise argmin can never pick them. Pixels are flat-indexed in the
    (C, H, W) layout of image_core.
    """

    lo: np.ndarray
    size: np.ndarray
    costs: np.ndarray
    d: int

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.int64)
        self.size = np.asarray(self.size, dtype=np.int64)
        self.costs = np.asarray(self.costs, dtype=np.float64)
        n = self.lo.shape[0]
        if self.size.shape != (n,) or self.costs.shape != (self.d, n):
            raise ValueError("inconsistent cost table shapes")
        if np.any(self.size < 1) or np.any(self.size > self.d):
            raise ValueError("range sizes must lie in [1, d]")

    @property
    def num_pixels(self) -> int:
        return self.lo.shape[0]

    def move_values(self) -> np.ndarray:
        """(d, n) matrix of the move value each row represents."""
        return self.lo[np.newaxis, :] + np.arange(self.d, dtype=np.int64)[:, np.newaxis]

    def hi(self) -> np.ndarray:
        return self.lo + self.size - 1

    def contains(self, moves_flat: np.ndarray) -> np.ndarray:
        m = np.asarray(moves_flat)
        return (m >= self.lo) & (m <= self.hi())

    def cost_of(self, moves_flat: np.ndarray) -> np.ndarray:
        """Per-pixel cost of a move field; every move must be admissible."""
        m = np.asarray(moves_flat, dtype=np.int64)
        if m.shape != self.lo.shape:
            raise ValueError("move field has wrong length")
        bad = ~self.contains(m)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ValueError(
                f"move {m[i]} outside admissible range "
                f"[{self.lo[i]}, {self.hi()[i]}] at pixel {i}"
            )
        return self.costs[m - self.lo, np.arange(self.num_pixels)]


def _mean_filter(plane: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(plane, size=size, mode="reflect")


def hill_unit_costs(
    image: PixelImage, eps: float = HILL_EPS, cap: float = COST_CAP
) -> np.ndarray:
    """HILL cost of a +-1 change, per channel.

    w = L2 * (1 / (L1 * |I * H|)) with H the KB high-pass, L1 a 3x3 and L2 a
    15x15 uniform average. Positive denominators below ``eps`` are raised to
    ``eps``; an exactly zero denominator means a dead-flat neighborhood whose
    reciprocal is infinite, so it is replaced by a finite stand-in large
    enough that any 15x15 window containing it averages past ``cap`` and gets
    capped (flat images therefore come out uniformly at the cap).
    """
    wet = cap * 225.0
    out = np.empty(image.shape, dtype=np.float64)
    for c in range(image.channels):
        plane = image.values[c].astype(np.float64)
        residual = np.abs(ndimage.convolve(plane, KB_KERNEL, mode="reflect"))
        smoothed = _mean_filter(residual, 3)
        inv = np.where(smoothed == 0.0, wet, 1.0 / np.maximum(smoothed, eps))
        cost = _mean_filter(inv, 15)
        out[c] = np.minimum(cost, cap)
    return out


def hill_cost_table(unit: np.ndarray, ranges: "AdmissibleRanges") -> CostTable:
    """Extend the +-1 HILL cost to larger moves as w_i(l) = |l| * w_i.

    Symmetric, increasing in |l| and zero at zero, which is all the cost
    model promises; the table rows follow the quantizer's admissible ranges.
    """
    unit_flat = np.asarray(unit, dtype=np.float64).ravel()
    return _table_from_fn(ranges, lambda moves: np.abs(moves) * unit_flat)


def _table_from_fn(ranges: "AdmissibleRanges", cost_fn) -> CostTable:
    lo, size, d = ranges.lo, ranges.size, ranges.d
    n = lo.shape[0]
    moves = lo[np.newaxis, :] + np.arange(d, dtype=np.int64)[:, np.newaxis]
    costs = cost_fn(moves).astype(np.float64)
    invalid = np.arange(d)[:, np.newaxis] >= size[np.newaxis, :]
    costs[invalid] = np.inf
    return CostTable(lo=lo, size=size, costs=costs, d=d)


def quadratic_cost_table(sigma2: np.ndarray, ranges: "AdmissibleRanges") -> CostTable:
    """Cost table for w_i(l) = l^2 / sigma_i^2 (closed form not required)."""
    s2 = np.asarray(sigma2, dtype=np.float64).ravel()
    if np.any(s2 <= 0):
        raise ValueError("variances must be positive")
    return _table_from_fn(ranges, lambda moves: (moves.astype(np.float64) ** 2) / s2)


# ---------------------------------------------------------------------------
# Variance estimation for the quadratic model.
# ---------------------------------------------------------------------------

@dataclass
class VarianceParams:
    """Small-image-friendly defaults; the reference literature targets much
    larger covers, so these are configuration rather than ground truth."""

    wiener_window: int = 3
    block: int = 8
    n_atoms: int = 6
    floor: float = 0.01


def wiener_residual(plane: np.ndarray, window: int = 3) -> np.ndarray:
    """Residual of a local-MMSE (Wiener) filter over a window x window
    neighborhood, with the noise level taken as the mean local variance."""
    plane = np.asarray(plane, dtype=np.float64)
    local_mean = _mean_filter(plane, window)
    local_sq = _mean_filter(plane * plane, window)
    local_var = np.maximum(local_sq - local_mean * local_mean, 0.0)
    noise = local_var.mean()
    centered = plane - local_mean
    if noise == 0.0:
        return centered
    shrink = np.where(local_var > noise, noise / np.maximum(local_var, noise), 1.0)
    return centered * shrink


def cosine_basis(block: int, n_atoms: int) -> np.ndarray:
    """(block^2, n_atoms) matrix of the lowest-frequency 2-D cosine atoms,
    ordered by total frequency i+j then by i."""
    freqs = sorted(
        ((i, j) for i in range(block) for j in range(block)),
        key=lambda ij: (ij[0] + ij[1], ij[0]),
    )[:n_atoms]
    grid = (2.0 * np.arange(block) + 1.0) * math.pi / (2.0 * block)
    cols = []
    for i, j in freqs:
        atom = np.outer(np.cos(i * grid), np.cos(j * grid))
        cols.append(atom.ravel())
    return np.stack(cols, axis=1)


def _sliding_blocks(plane: np.ndarray, block: int) -> np.ndarray:
    """(H*W, block^2) matrix of the block around each pixel, mirror padded.

    The block for pixel (r, c) spans rows r-(block-1)//2 .. r+block//2, so
    even block sizes sit almost-centered.
    """
    before = (block - 1) // 2
    after = block // 2
    padded = np.pad(plane, ((before, after), (before, after)), mode="symmetric")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (block, block))
    h, w = plane.shape
    return windows.reshape(h * w, block * block)


def estimate_variance_map(
    image: PixelImage, params: VarianceParams | None = None
) -> np.ndarray:
    """Per-pixel residual variance, per channel.

    The Wiener residual is fitted, per pixel, over the surrounding block with
    the lowest-frequency cosine atoms; the estimate is the residual energy of
    that fit divided by the residual degrees of freedom, floored at
    ``params.floor``.
    """
    params = params or VarianceParams()
    b, q = params.block, params.n_atoms
    if q >= b * b:
        raise ValueError("need fewer atoms than block pixels")
    basis = cosine_basis(b, q)
    qr_q, _ = np.linalg.qr(basis)
    out = np.empty(image.shape, dtype=np.float64)
    dof = b * b - q
    for c in range(image.channels):
        residual = wiener_residual(image.values[c].astype(np.float64), params.wiener_window)
        blocks = _sliding_blocks(residual, b)
        total = np.einsum("ij,ij->i", blocks, blocks)
        fitted = blocks @ qr_q
        explained = np.einsum("ij,ij->i", fitted, fitted)
        rss = np.maximum(total - explained, 0.0)
        out[c] = (rss / dof).reshape(image.height, image.width)
    return np.maximum(out, params.floor)


def mipod_cost(sigma2, move) -> np.ndarray:
    """Quadratic stego cost l^2 / sigma^2 (even in l, increasing in |l|)."""
    s2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(s2 <= 0):
        raise ValueError("variances must be positive")
    m = np.asarray(move, dtype=np.float64)
    return m * m / s2


# ---------------------------------------------------------------------------
# Lattices and the sign-coherence discount.
# ---------------------------------------------------------------------------

@dataclass
class LatticeSchedule:
    """Ordered disjoint pixel-index sets covering the image.

    Color images get 12 lattices: channels ordered green, red, blue, and
    within each channel the parity classes (row%2, col%2) in the order
    (0,0), (1,1), (0,1), (1,0). Single-channel toy images get 4.
    """

    shape: tuple[int, int, int]
    lattices: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.lattices)


def build_lattice_schedule(shape: tuple[int, int, int]) -> LatticeSchedule:
    c, h, w = shape
    if c == 3:
        channel_order = [1, 0, 2]  # green first
    elif c == 1:
        channel_order = [0]
    else:
        raise ValueError(f"lattice schedule needs 1 or 3 channels, got {c}")
    rows = np.arange(h)[:, np.newaxis]
    cols = np.arange(w)[np.newaxis, :]
    parities = [(0, 0), (1, 1), (0, 1), (1, 0)]
    lattices = []
    for ch in channel_order:
        base = ch * h * w
        for pr, pc in parities:
            mask = (rows % 2 == pr) & (cols % 2 == pc)
            flat = base + (rows * w + cols)[mask].ravel()
            lattices.append(np.sort(flat).astype(np.int64))
    return LatticeSchedule(shape=(c, h, w), lattices=lattices)


def neighborhood_move_sign(committed_moves: np.ndarray) -> np.ndarray:
    """Sign of the mean committed move in the 3x3 cross-channel window.

    The mean is over pixels that already carry a committed move; since those
    are the only nonzero contributors and the count is positive whenever any
    neighbor is committed, the sign of the window *sum* equals the sign of
    the mean (and an all-zero window means no discount either way). The
    center pixel of the same channel is excluded.
    """
    moves = np.asarray(committed_moves, dtype=np.float64)
    if moves.ndim != 3:
        raise ValueError("committed moves must be a (C, H, W) field")
    per_channel = np.stack(
        [
            ndimage.correlate(moves[c], np.ones((3, 3)), mode="constant", cval=0.0)
            for c in range(moves.shape[0])
        ]
    )
    window_sum = per_channel.sum(axis=0)[np.newaxis, :, :] - moves
    return np.sign(window_sum).astype(np.int64)


def cmd_update(
    table: CostTable, committed_moves: np.ndarray, lattice: np.ndarray
) -> CostTable:
    """Divide by 9 the cost of lattice moves whose sign matches the sign of
    the neighborhood's committed modifications; everything else unchanged.

    ``committed_moves`` holds the moves already fixed on previously processed
    lattices and zero elsewhere. A zero move neither earns nor grants a
    discount (only strict sign agreement counts).
    """
    sign = neighborhood_move_sign(committed_moves).ravel()[np.asarray(lattice)]
    costs = table.costs.copy()
    moves = table.move_values()[:, lattice]
    move_sign = np.sign(moves)
    discount = (move_sign == sign[np.newaxis, :]) & (sign[np.newaxis, :] != 0)
    cols = costs[:, lattice]
    cols[discount] = cols[discount] / 9.0
    costs[:, lattice] = cols
    return CostTable(lo=table.lo, size=table.size, costs=costs, d=table.d)


def stego_distortion(table: CostTable, moves) -> float:
    """Additive distortion D = sum_i w_i(l_i)."""
    m = np.asarray(moves)
    return float(np.sum(table.cost_of(m.ravel())))
