"""Post-processing that maps a continuous adversarial image to an integer
image minimizing stego-distortion while staying adversarial.

Per pixel, the admissible moves are the d consecutive integers around the
attack's perturbation, intersected with the pixel cube. A Lagrangian
relaxation trades the additive stego cost against the linearized classifier
loss: for a multiplier lam the per-pixel problem is to minimize
``w_i(l) + lam * (p_i - l) * g_i`` over the admissible l, which a columnwise
argmin solves exactly. For quadratic costs l^2/sigma^2 the minimizer has the
closed form ``clip(round(lam * g * sigma^2 / 2), range)``, and the multiplier
search can stop at an explicit bound above which every pixel is clipped.

Sign convention: the classifier module returns the analytic gradient of the
adversarial loss (positive margin = correctly classified). The multiplier
machinery needs the *descent* direction of that loss, so g here is the
negated classifier gradient; with this convention larger lam pushes the
moves further past the attack point and the image becomes more adversarial,
which is what the binary search relies on (raise lam while the probe fails,
lower it while it succeeds).

Every probe of a candidate multiplier builds the integer image and asks the
real network, because the linearization is only a local approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import (
    CostTable,
    VarianceParams,
    build_lattice_schedule,
    estimate_variance_map,
    hill_cost_table,
    hill_unit_costs,
    neighborhood_move_sign,
    quadratic_cost_table,
)
from .image_core import ContinuousImage, PixelImage, apply_moves, perturbation

COST_MODELS = ("baseline", "hill", "mipod", "gina")


@dataclass
class AdmissibleRanges:
    """Per-pixel consecutive integer moves, flat-indexed.

    lo/hi come from the d-wide window around ceil(p) intersected with
    [-I_o, 255 - I_o]; ``truncated`` records where that intersection bit.
    """

    lo: np.ndarray
    hi: np.ndarray
    d: int
    truncated: np.ndarray

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo + 1


def compute_ranges(p: np.ndarray, d: int, original: PixelImage) -> AdmissibleRanges:
    if d < 2 or d % 2 != 0:
        raise ValueError("degree of freedom d must be an even integer >= 2")
    p_flat = np.asarray(p, dtype=np.float64).ravel()
    pix = original.values.ravel()
    if p_flat.shape != pix.shape:
        raise ValueError("perturbation shape does not match image")
    base = np.ceil(p_flat).astype(np.int64)
    lo_raw = base - d // 2
    hi_raw = base + d // 2 - 1
    lo = np.maximum(lo_raw, -pix)
    hi = np.minimum(hi_raw, 255 - pix)
    if np.any(lo > hi):
        raise ValueError("empty admissible range; perturbation leaves the pixel cube")
    truncated = (lo != lo_raw) | (hi != hi_raw)
    return AdmissibleRanges(lo=lo, hi=hi, d=d, truncated=truncated)


@dataclass
class LagrangianInstance:
    """Columnwise minimization data: costs W, linearized loss terms G, and
    the move value each row stands for. Rows past a truncated range carry
    infinite cost so they can never win."""

    W: np.ndarray
    G: np.ndarray
    moves: np.ndarray
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("multiplier must be nonnegative")
        if not (self.W.shape == self.G.shape == self.moves.shape):
            raise ValueError("W, G and move matrices must share a shape")


def build_instance(
    table: CostTable, p_flat: np.ndarray, g_flat: np.ndarray, lam: float
) -> LagrangianInstance:
    moves = table.move_values()
    G = (np.asarray(p_flat)[np.newaxis, :] - moves) * np.asarray(g_flat)[np.newaxis, :]
    return LagrangianInstance(W=table.costs, G=G, moves=moves, lam=lam)


def solve_given_lambda(inst: LagrangianInstance) -> np.ndarray:
    """Per-pixel argmin of W + lam*G; ties go to the smallest |l|, then to
    the negative move, so results are deterministic."""
    obj = inst.W + inst.lam * inst.G
    col_min = obj.min(axis=0)
    tie = obj == col_min[np.newaxis, :]
    rank = 2 * np.abs(inst.moves) + (inst.moves > 0)
    rank = np.where(tie, rank, np.iinfo(np.int64).max)
    rows = rank.argmin(axis=0)
    return inst.moves[rows, np.arange(inst.moves.shape[1])]


def _round_half_toward_zero(x: np.ndarray) -> np.ndarray:
    # Matches the generic solver's tie rule: a vertex exactly between two
    # integers resolves to the smaller magnitude.
    return np.where(x >= 0.0, np.ceil(x - 0.5), np.floor(x + 0.5))


def _solve_quadratic_flat(
    s2_pos: np.ndarray,
    s2_neg: np.ndarray,
    g: np.ndarray,
    p: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Closed-form columnwise minimizer for (possibly sign-discounted)
    quadratic costs: per sign branch the cost is a parabola, so the branch
    minimum is the in-range integer nearest the vertex; the cheaper branch
    wins, with the generic solver's tie rule."""
    half = 0.5 * lam
    cand_pos = np.clip(_round_half_toward_zero(half * g * s2_pos), np.maximum(lo, 0), hi)
    cand_neg = np.clip(_round_half_toward_zero(half * g * s2_neg), lo, np.minimum(hi, 0))
    f_pos = cand_pos * cand_pos / s2_pos + lam * ((p - cand_pos) * g)
    f_neg = cand_neg * cand_neg / s2_neg + lam * ((p - cand_neg) * g)
    f_pos = np.where(hi >= 0, f_pos, np.inf)
    f_neg = np.where(lo <= 0, f_neg, np.inf)
    tie = f_neg == f_pos
    pick_neg = (f_neg < f_pos) | (tie & (np.abs(cand_neg) <= np.abs(cand_pos)))
    return np.where(pick_neg, cand_neg, cand_pos).astype(np.int64)


def solve_quadratic_given_lambda(
    sigma2: np.ndarray,
    g: np.ndarray,
    p: np.ndarray,
    d: int,
    lam: float,
    original: PixelImage,
) -> np.ndarray:
    """Eq.-style closed form for plain quadratic costs, returned as a
    (C, H, W) move field."""
    s2 = np.asarray(sigma2, dtype=np.float64).ravel()
    if np.any(s2 <= 0):
        raise ValueError("variances must be positive")
    ranges = compute_ranges(p, d, original)
    moves = _solve_quadratic_flat(
        s2, s2, np.asarray(g, dtype=np.float64).ravel(),
        np.asarray(p, dtype=np.float64).ravel(), ranges.lo, ranges.hi, lam,
    )
    return moves.reshape(original.shape)


def lambda_upper_bound(sigma2, g, p, d: int) -> float:
    """Smallest multiplier beyond which every pixel's closed-form move is
    clipped, hence the whole solution stops changing. Pixels with zero
    gradient contribute nothing."""
    s2 = np.asarray(sigma2, dtype=np.float64).ravel()
    gv = np.asarray(g, dtype=np.float64).ravel()
    pv = np.asarray(p, dtype=np.float64).ravel()
    ceil_p = np.ceil(pv)
    denom = gv * s2
    with np.errstate(divide="ignore", invalid="ignore"):
        when_pos = (2.0 * ceil_p + d - 2.0) / denom
        when_neg = (2.0 * ceil_p - d) / denom
    lam = np.where(gv > 0, when_pos, np.where(gv < 0, when_neg, 0.0))
    lam = np.maximum(lam, 0.0)  # |.|_+ : clipping already active at lam = 0
    return float(lam.max()) if lam.size else 0.0


# ---------------------------------------------------------------------------
# Multiplier search with real network probes.
# ---------------------------------------------------------------------------

@dataclass
class SearchConfig:
    """Stopping rule |hi - lo| <= max(abs_tol, rel_tol * hi), a probe-count
    cap to bound network calls, and the doubling cap for cost models with no
    analytic multiplier bound."""

    rel_tol: float = 1e-3
    abs_tol: float | None = None
    max_probes: int = 40
    hill_lambda_cap: float = 2.0**60
    variance: VarianceParams = field(default_factory=VarianceParams)


@dataclass
class QuantizeResult:
    i_q: PixelImage
    moves: np.ndarray
    lam: float
    distortion: float
    loss: float
    adversarial: bool
    network_calls: int


@dataclass
class _Probe:
    lam: float
    moves_flat: np.ndarray
    i_q: PixelImage
    loss: float
    adversarial: bool


class _LambdaProber:
    """Solves the relaxed problem at a multiplier and asks the network
    whether the resulting integer image is still adversarial."""

    def __init__(self, original, classifier, c_o, c_a, solve, trace=None):
        self.original = original
        self.classifier = classifier
        self.c_o = c_o
        self.c_a = c_a
        self.solve = solve
        self.trace = trace
        self.calls = 0

    def __call__(self, lam: float) -> _Probe:
        moves = self.solve(lam)
        i_q = apply_moves(self.original, moves.reshape(self.original.shape))
        out = self.classifier.predict_pixel(i_q)
        self.calls += 1
        loss = float(out.logits[self.c_o] - out.logits[self.c_a])
        probe = _Probe(lam, moves, i_q, loss, loss < 0.0)
        if self.trace is not None:
            self.trace.append({"lam": lam, "loss": loss, "adversarial": probe.adversarial})
        return probe


def _bisect(prober, lo, hi, best, search, abs_tol):
    while prober.calls < search.max_probes and (hi - lo) > max(abs_tol, search.rel_tol * hi):
        mid = 0.5 * (lo + hi)
        r = prober(mid)
        if r.adversarial:
            hi, best = mid, r
        else:
            lo = mid
    return best


def _search_bounded(prober, lam_max, search):
    """Quadratic costs: the multiplier domain is [0, lam_max]."""
    first = prober(0.0)
    if first.adversarial or lam_max <= 0.0:
        return first
    top = prober(lam_max)
    if not top.adversarial:
        return top  # even the saturated solution fails; flag stays down
    abs_tol = search.abs_tol if search.abs_tol is not None else 1e-3 * lam_max
    return _bisect(prober, 0.0, lam_max, top, search, abs_tol)


def _search_doubling(prober, search):
    """No analytic bound: double from 1 until adversarial, then bisect."""
    first = prober(0.0)
    if first.adversarial:
        return first
    lam, last_fail, top, last = 1.0, 0.0, None, first
    while prober.calls < search.max_probes and lam <= search.hill_lambda_cap:
        r = prober(lam)
        if r.adversarial:
            top = r
            break
        last_fail, last = lam, r
        lam *= 2.0
    if top is None:
        return last
    abs_tol = search.abs_tol if search.abs_tol is not None else 1e-3 * top.lam
    return _bisect(prober, last_fail, top.lam, top, search, abs_tol)


def _per_sign_quadratic_distortion(s2_pos, s2_neg, moves_flat) -> float:
    m = moves_flat.astype(np.float64)
    s2 = np.where(moves_flat >= 0, s2_pos, s2_neg)
    return float(np.sum(m * m / s2))


def _validate_attacked(classifier, x_a, c_o):
    out = classifier.predict_pixel(x_a)
    c_a = out.predicted_class
    if c_a == c_o or not (out.logits[c_o] < out.logits[c_a]):
        raise ValueError("x_a is not adversarial against the origin class")
    return out, c_a


def binary_search_lambda(
    original: PixelImage,
    x_a: ContinuousImage,
    classifier,
    c_o: int,
    cost_model: str = "mipod",
    d: int = 2,
    search: SearchConfig | None = None,
    trace: list | None = None,
) -> QuantizeResult:
    """Find the smallest probed multiplier whose move field keeps the image
    adversarial; if even the largest multiplier fails, that image is
    returned with the adversarial flag down.

    The adversarial class is fixed from the attacked image's prediction and
    the loss is linearized once, so network traffic is one prediction, one
    gradient, and one prediction per probe.
    """
    search = search or SearchConfig()
    out0, c_a = _validate_attacked(classifier, x_a, c_o)
    calls = 1
    p = perturbation(x_a, original)
    ranges = compute_ranges(p, d, original)
    _, grad = classifier.loss_gradient(x_a, c_o, c_a)
    calls += 1
    gq = -grad.ravel()  # descent direction of the adversarial loss
    p_flat = p.ravel()

    if cost_model in ("baseline", "mipod"):
        if cost_model == "baseline":
            s2 = np.ones(p_flat.shape[0])
        else:
            s2 = estimate_variance_map(original, search.variance).ravel()
        solve = lambda lam: _solve_quadratic_flat(
            s2, s2, gq, p_flat, ranges.lo, ranges.hi, lam
        )
        prober = _LambdaProber(original, classifier, c_o, c_a, solve, trace)
        best = _search_bounded(prober, lambda_upper_bound(s2, gq, p_flat, d), search)
        distortion = _per_sign_quadratic_distortion(s2, s2, best.moves_flat)
    elif cost_model == "hill":
        unit = hill_unit_costs(original)
        table = hill_cost_table(unit, ranges)
        solve = lambda lam: solve_given_lambda(build_instance(table, p_flat, gq, lam))
        prober = _LambdaProber(original, classifier, c_o, c_a, solve, trace)
        best = _search_doubling(prober, search)
        distortion = float(np.sum(table.cost_of(best.moves_flat)))
    else:
        raise ValueError(f"unknown cost model {cost_model!r}")

    return QuantizeResult(
        i_q=best.i_q,
        moves=best.moves_flat.reshape(original.shape),
        lam=best.lam,
        distortion=distortion,
        loss=best.loss,
        adversarial=best.adversarial,
        network_calls=calls + prober.calls,
    )


def gina_post_process(
    original: PixelImage,
    x_a: ContinuousImage,
    classifier,
    c_o: int,
    d: int = 2,
    search: SearchConfig | None = None,
    trace: list | None = None,
) -> QuantizeResult:
    """Sequential quadratic quantization over the lattice schedule.

    Before each lattice the gradient is recomputed at the hybrid image
    (integer moves on committed lattices, the continuous attack elsewhere)
    and the sign-coherence discount is applied. The per-lattice multiplier
    search is driven by a linearized budget: after lattice k the cumulative
    linearized loss decrease must reach k/m of the attack's loss margin, so
    each lattice contributes its share of the required adversariality. A
    final network call verifies the result; if verification fails, one
    global multiplier search with the discounted costs repairs it.
    """
    search = search or SearchConfig()
    out0, c_a = _validate_attacked(classifier, x_a, c_o)
    calls = 1
    margin = float(out0.logits[c_a] - out0.logits[c_o])  # = |L(p)|

    p = perturbation(x_a, original)
    p_flat = p.ravel()
    ranges = compute_ranges(p, d, original)
    sigma2 = estimate_variance_map(original, search.variance).ravel()
    schedule = build_lattice_schedule(original.shape)
    m = len(schedule)

    committed = np.zeros(original.shape, dtype=np.int64)
    committed_mask = np.zeros(original.shape, dtype=bool)
    achieved = 0.0
    total_cost = 0.0
    lam_star = 0.0

    for k, lattice in enumerate(schedule.lattices, start=1):
        hybrid = x_a.values.copy()
        hybrid[committed_mask] = (original.values + committed)[committed_mask]
        _, grad = classifier.loss_gradient(ContinuousImage(hybrid, "pixel"), c_o, c_a)
        calls += 1
        gq = -grad.ravel()[lattice]
        pk = p_flat[lattice]
        lo, hi = ranges.lo[lattice], ranges.hi[lattice]
        s2 = sigma2[lattice]
        sign = neighborhood_move_sign(committed).ravel()[lattice]
        s2_pos = np.where(sign > 0, 9.0 * s2, s2)
        s2_neg = np.where(sign < 0, 9.0 * s2, s2)

        def solve(lam):
            return _solve_quadratic_flat(s2_pos, s2_neg, gq, pk, lo, hi, lam)

        def decrease(moves):
            # linearized loss change of this lattice is sum (p - l) * g_q
            return -float(np.dot(pk - moves, gq))

        target = (k / m) * margin - achieved
        lam_max = lambda_upper_bound(s2, gq, pk, d)
        lam_k = 0.0
        moves_k = solve(0.0)
        if decrease(moves_k) < target and lam_max > 0.0:
            top = solve(lam_max)
            if decrease(top) < target:
                lam_k, moves_k = lam_max, top  # budget unreachable; best effort
            else:
                lo_lam, hi_lam = 0.0, lam_max
                lam_k, moves_k = lam_max, top
                abs_tol = search.abs_tol if search.abs_tol is not None else 1e-3 * lam_max
                for _ in range(60):
                    if hi_lam - lo_lam <= max(abs_tol, search.rel_tol * hi_lam):
                        break
                    mid = 0.5 * (lo_lam + hi_lam)
                    cand = solve(mid)
                    if decrease(cand) >= target:
                        hi_lam, lam_k, moves_k = mid, mid, cand
                    else:
                        lo_lam = mid

        committed.ravel()[lattice] = moves_k
        committed_mask.ravel()[lattice] = True
        achieved += decrease(moves_k)
        total_cost += _per_sign_quadratic_distortion(s2_pos, s2_neg, moves_k)
        lam_star = max(lam_star, lam_k)
        if trace is not None:
            trace.append(
                {"lattice": k, "lam": lam_k, "decrease": decrease(moves_k), "target": target}
            )

    i_q = apply_moves(original, committed)
    out = classifier.predict_pixel(i_q)
    calls += 1
    loss_q = float(out.logits[c_o] - out.logits[c_a])
    if loss_q < 0.0:
        return QuantizeResult(i_q, committed, lam_star, total_cost, loss_q, True, calls)

    # Repair pass: one global search over all pixels with the discounted
    # quadratic costs induced by the committed moves.
    sign = neighborhood_move_sign(committed).ravel()
    s2_pos = np.where(sign > 0, 9.0 * sigma2, sigma2)
    s2_neg = np.where(sign < 0, 9.0 * sigma2, sigma2)
    _, grad = classifier.loss_gradient(x_a, c_o, c_a)
    calls += 1
    gq = -grad.ravel()
    solve = lambda lam: _solve_quadratic_flat(
        s2_pos, s2_neg, gq, p_flat, ranges.lo, ranges.hi, lam
    )
    prober = _LambdaProber(original, classifier, c_o, c_a, solve, trace)
    best = _search_bounded(prober, lambda_upper_bound(sigma2, gq, p_flat, d), search)
    return QuantizeResult(
        i_q=best.i_q,
        moves=best.moves_flat.reshape(original.shape),
        lam=best.lam,
        distortion=_per_sign_quadratic_distortion(s2_pos, s2_neg, best.moves_flat),
        loss=best.loss,
        adversarial=best.adversarial,
        network_calls=calls + prober.calls,
    )


def post_process(
    original: PixelImage,
    x_a: ContinuousImage,
    classifier,
    c_o: int,
    cost_model: str = "baseline",
    d: int = 2,
    search: SearchConfig | None = None,
    trace: list | None = None,
) -> QuantizeResult:
    """Dispatch on the cost model: 'baseline' is the quadratic model with
    unit variance (pure squared-move distortion), 'hill' runs the generic
    solver on HILL tables, 'mipod' the quadratic closed form, and 'gina' the
    sequential lattice variant."""
    if cost_model not in COST_MODELS:
        raise ValueError(f"unknown cost model {cost_model!r}; pick one of {COST_MODELS}")
    if cost_model == "gina":
        return gina_post_process(original, x_a, classifier, c_o, d, search, trace)
    return binary_search_lambda(
        original, x_a, classifier, c_o, cost_model, d, search, trace
    )
