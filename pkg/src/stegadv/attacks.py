"""Best-effort white-box attacks producing continuous adversarial images.

Both attacks grow a distortion budget geometrically until the class flips,
then bisect between the last failing and first succeeding budget, all within
a fixed iteration allowance. The working loss is the logit margin between
the origin class and the current runner-up class, so descending it is the
straightest path out of the origin class. Outputs stay continuous: rounding
is exclusively the quantizer's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image_core import ContinuousImage, PixelImage, l2_distortion

# Past this budget an FGSM step saturates every pixel, and a PGD ball this
# large contains the whole pixel cube; growing further cannot help.
_FGSM_EPS_CAP = 512.0


@dataclass
class AttackConfig:
    kind: str = "pgd2"
    max_iterations: int = 200
    eps_init: float = 1.0
    growth: float = 2.0
    refine_steps: int = 6
    pgd_step_fraction: float = 0.1
    pgd_iters_per_stage: int = 10

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd2"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.eps_init <= 0 or self.growth <= 1:
            raise ValueError("need eps_init > 0 and growth > 1")


@dataclass
class AttackResult:
    x_a: ContinuousImage
    success: bool
    iterations_used: int
    final_l2: float
    c_a: int


def _require_correct(classifier, image: PixelImage, c_o: int):
    out = classifier.predict_pixel(image)
    if out.predicted_class != c_o:
        raise ValueError(
            f"attack precondition violated: classifier predicts "
            f"{out.predicted_class}, expected {c_o}"
        )
    return out


def _runner_up(out, c_o: int) -> int:
    probs = out.probabilities.copy()
    probs[c_o] = -np.inf
    return int(np.argmax(probs))


def _is_adversarial(out, c_o: int) -> bool:
    c = out.predicted_class
    return bool(c != c_o and out.logits[c_o] < out.logits[c])


def run_attack(classifier, image: PixelImage, c_o: int, config: AttackConfig) -> AttackResult:
    if config.kind == "fgsm":
        return fgsm_best_effort(classifier, image, c_o, config)
    return pgd2_best_effort(classifier, image, c_o, config)


def fgsm_best_effort(
    classifier, image: PixelImage, c_o: int, config: AttackConfig
) -> AttackResult:
    """Single-gradient sign attack with a growing-then-bisected step size."""
    out0 = _require_correct(classifier, image, c_o)
    target = _runner_up(out0, c_o)
    _, grad = classifier.loss_gradient(image, c_o, target)
    calls = 1
    base = image.values.astype(np.float64)
    direction = -np.sign(grad)

    def candidate(eps: float) -> np.ndarray:
        return np.clip(base + eps * direction, 0.0, 255.0)

    def probe(eps: float):
        nonlocal calls
        calls += 1
        return classifier.predict_pixel(ContinuousImage(candidate(eps), "pixel"))

    eps = config.eps_init
    last_fail = 0.0
    success_eps = None
    while calls < config.max_iterations:
        if _is_adversarial(probe(eps), c_o):
            success_eps = eps
            break
        last_fail = eps
        eps *= config.growth
        if eps > _FGSM_EPS_CAP:
            break

    if success_eps is None:
        x = ContinuousImage(candidate(min(eps, _FGSM_EPS_CAP)), "pixel")
        out = classifier.predict_pixel(x)
        calls += 1
        return AttackResult(x, False, calls, l2_distortion(x, image), out.predicted_class)

    for _ in range(config.refine_steps):
        if calls >= config.max_iterations:
            break
        mid = 0.5 * (last_fail + success_eps)
        if _is_adversarial(probe(mid), c_o):
            success_eps = mid
        else:
            last_fail = mid

    x = ContinuousImage(candidate(success_eps), "pixel")
    out = classifier.predict_pixel(x)  # fresh verification of the returned image
    calls += 1
    success = _is_adversarial(out, c_o)
    return AttackResult(x, success, calls, l2_distortion(x, image), out.predicted_class)


def _pgd_stage(classifier, base: np.ndarray, c_o: int, eps: float, config: AttackConfig,
               budget: int):
    """One fixed-radius PGD run from the original image.

    Returns (best adversarial values or None, its class, gradient calls).
    """
    x = base.copy()
    best = None
    best_l2 = np.inf
    best_class = -1
    calls = 0
    step = eps * config.pgd_step_fraction
    for _ in range(config.pgd_iters_per_stage):
        if calls >= budget:
            break
        out = classifier.predict_pixel(ContinuousImage(x, "pixel"))
        if _is_adversarial(out, c_o):
            l2 = float(np.sqrt(np.sum((x - base) ** 2)))
            if l2 < best_l2:
                best, best_l2, best_class = x.copy(), l2, out.predicted_class
        target = _runner_up(out, c_o)
        _, grad = classifier.loss_gradient(ContinuousImage(x, "pixel"), c_o, target)
        calls += 1
        norm = float(np.sqrt(np.sum(grad * grad)))
        if norm < 1e-12:
            break  # flat loss surface: cannot step, report failure upstream
        x = x - step * grad / norm
        delta = x - base
        dn = float(np.sqrt(np.sum(delta * delta)))
        if dn > eps:
            delta *= eps / dn
            x = base + delta
        x = np.clip(x, 0.0, 255.0)
    out = classifier.predict_pixel(ContinuousImage(x, "pixel"))
    if _is_adversarial(out, c_o):
        l2 = float(np.sqrt(np.sum((x - base) ** 2)))
        if l2 < best_l2:
            best, best_l2, best_class = x.copy(), l2, out.predicted_class
    return best, best_class, calls


def pgd2_best_effort(
    classifier, image: PixelImage, c_o: int, config: AttackConfig
) -> AttackResult:
    """Euclidean projected gradient descent with a growing radius schedule.

    Iterates step along the normalized gradient, are projected back onto the
    eps-ball around the original image and clamped to the pixel cube; the
    lowest-distortion adversarial iterate seen anywhere in the schedule is
    kept. Only gradient calls count against the iteration budget.
    """
    _require_correct(classifier, image, c_o)
    base = image.values.astype(np.float64)
    eps_cap = 2.0 * 255.0 * np.sqrt(base.size)

    best = None
    best_class = -1
    calls = 0
    eps = config.eps_init
    last_fail = 0.0
    success_eps = None
    while calls < config.max_iterations and eps <= eps_cap:
        found, found_class, used = _pgd_stage(
            classifier, base, c_o, eps, config, config.max_iterations - calls
        )
        calls += used
        if found is not None:
            success_eps = eps
            if best is None or np.sum((found - base) ** 2) < np.sum((best - base) ** 2):
                best, best_class = found, found_class
            break
        if used == 0:
            break  # budget exhausted mid-schedule
        last_fail = eps
        eps *= config.growth

    if success_eps is not None:
        for _ in range(config.refine_steps):
            if calls >= config.max_iterations:
                break
            mid = 0.5 * (last_fail + success_eps)
            found, found_class, used = _pgd_stage(
                classifier, base, c_o, mid, config, config.max_iterations - calls
            )
            calls += used
            if found is not None:
                success_eps = mid
                if np.sum((found - base) ** 2) < np.sum((best - base) ** 2):
                    best, best_class = found, found_class
            else:
                last_fail = mid

    if best is None:
        x = ContinuousImage(base, "pixel")
        return AttackResult(x, False, calls, 0.0, c_o)

    x = ContinuousImage(best, "pixel")
    out = classifier.predict_pixel(x)  # fresh verification of the returned image
    success = _is_adversarial(out, c_o)
    return AttackResult(x, success, calls, l2_distortion(x, image), out.predicted_class)
