"""Training losses for reranking and refinement, with analytic gradients.

Reranking: cross-entropy to the lowest-center-error candidate, a Huber
penalty on the softmax-soft-aggregated box center, and a listwise loss whose
teacher softens the geometric errors of the best few candidates. Refinement:
Huber penalties on the diagonal-normalized center distance and on log-scale
differences. Every loss returns (value, gradient); the gradient checker at
the bottom validates any of them against central finite differences.

Losses only ever see the valid candidates (the ones overlapping the target);
gradients on masked candidates are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import ValidationError
from .geometry import BBox, FrameDims
from .validation import check_index, check_positive


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters and mixing weights."""

    tau: float = 0.15
    sigma_rank: float = 15.0
    top_m: int = 5
    huber_delta: float = 1.0
    lambda_geo: float = 0.1
    lambda_rank: float = 0.5
    lambda_dist: float = 0.1
    lambda_scale: float = 1.0

    def __post_init__(self):
        check_positive(self.tau, "tau")
        check_positive(self.sigma_rank, "sigma_rank")
        check_positive(self.huber_delta, "huber_delta")
        if int(self.top_m) < 1:
            raise ValidationError(f"top_m must be at least 1, got {self.top_m}")
        for name in ("lambda_geo", "lambda_rank", "lambda_dist", "lambda_scale"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")


def huber(r: float, delta: float) -> float:
    """Quadratic inside |r| <= delta, linear outside."""
    a = abs(r)
    if a <= delta:
        return 0.5 * r * r
    return delta * (a - 0.5 * delta)


def huber_deriv(r: float, delta: float) -> float:
    if abs(r) <= delta:
        return r
    return delta * math.copysign(1.0, r)


def _checked_mask(logits: np.ndarray, valid) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if valid is None:
        valid = np.ones(logits.size, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != logits.shape:
        raise ValidationError("validity mask length mismatch")
    if not valid.any():
        raise ValidationError("at least one candidate must be valid")
    if not np.all(np.isfinite(logits[valid])):
        raise ValidationError("valid logits must be finite")
    return valid


def _masked_softmax(logits: np.ndarray, valid: np.ndarray, tau: float = 1.0) -> np.ndarray:
    p = np.zeros(logits.size)
    sub = logits[valid] / tau
    sub = np.exp(sub - sub.max())
    p[valid] = sub / sub.sum()
    return p


def loss_ce(
    logits: np.ndarray, valid: np.ndarray | None, k_star: int
) -> tuple[float, np.ndarray]:
    """Cross-entropy pushing the oracle-best candidate's logit up.

    Invariant under a common shift of all logits; gradient is
    softmax - onehot(k_star), zero on masked candidates.
    """
    logits = np.asarray(logits, dtype=np.float64)
    valid = _checked_mask(logits, valid)
    check_index(k_star, logits.size, "k_star")
    if not valid[k_star]:
        raise ValidationError(f"k_star={k_star} is masked out")
    sub = logits[valid]
    m = sub.max()
    lse = m + math.log(np.exp(sub - m).sum())
    value = lse - float(logits[k_star])
    grad = _masked_softmax(logits, valid)
    grad[k_star] -= 1.0
    return value, grad


def loss_geo(
    logits: np.ndarray,
    valid: np.ndarray | None,
    boxes: Sequence[BBox],
    gt: BBox,
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Huber penalty on the center of the temperature-softmax box average.

    The candidate boxes are averaged with weights softmax(logits / tau) over
    the valid set; the penalty is on the Euclidean distance between that soft
    center and the target center, in pixels.
    """
    logits = np.asarray(logits, dtype=np.float64)
    valid = _checked_mask(logits, valid)
    if len(boxes) != logits.size:
        raise ValidationError("boxes and logits differ in length")
    pi = _masked_softmax(logits, valid, tau=cfg.tau)
    coords = np.array([b.as_array() for b in boxes])
    soft = pi @ coords
    dx = soft[0] - gt.cx
    dy = soft[1] - gt.cy
    dist = math.hypot(dx, dy)
    value = huber(dist, cfg.huber_delta)

    grad = np.zeros(logits.size)
    if dist > 0.0:
        scale = huber_deriv(dist, cfg.huber_delta) / dist
        # d value / d pi_k, then softmax-with-temperature backward
        a = scale * (dx * coords[:, 0] + dy * coords[:, 1])
        inner = float(pi @ a)
        grad = pi * (a - inner) / cfg.tau
    return value, grad


def loss_rank(
    logits: np.ndarray,
    valid: np.ndarray | None,
    errors: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Listwise cross-entropy against a geometric teacher on the best pool.

    The pool holds the min(top_m, n_valid) valid candidates with the smallest
    center errors (stable order). Teacher: softmax(-errors / sigma_rank);
    model: softmax of the pooled logits. Gradient is p - q on the pool.
    """
    logits = np.asarray(logits, dtype=np.float64)
    valid = _checked_mask(logits, valid)
    errors = np.asarray(errors, dtype=np.float64)
    if errors.shape != logits.shape:
        raise ValidationError("errors and logits differ in length")

    valid_idx = np.flatnonzero(valid)
    order = valid_idx[np.argsort(errors[valid_idx], kind="stable")]
    pool = order[: min(int(cfg.top_m), order.size)]

    q_raw = -errors[pool] / cfg.sigma_rank
    q = np.exp(q_raw - q_raw.max())
    q /= q.sum()
    s = logits[pool]
    m = s.max()
    log_p = (s - m) - math.log(np.exp(s - m).sum())
    value = float(-(q * log_p).sum())

    grad = np.zeros(logits.size)
    grad[pool] = np.exp(log_p) - q
    return value, grad


def loss_dist(
    refined: BBox, gt: BBox, dims: FrameDims, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Huber penalty on the diagonal-normalized refined-center distance.

    Gradient is over the refined box coordinates (cx, cy, w, h); the size
    entries are zero.
    """
    dx = refined.cx - gt.cx
    dy = refined.cy - gt.cy
    dist = math.hypot(dx, dy)
    u = dist / dims.diag
    value = huber(u, cfg.huber_delta)
    grad = np.zeros(4)
    if dist > 0.0:
        scale = huber_deriv(u, cfg.huber_delta) / (dist * dims.diag)
        grad[0] = scale * dx
        grad[1] = scale * dy
    return value, grad


def loss_scale(refined: BBox, gt: BBox, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Summed per-axis Huber penalties on log-size differences."""
    aw = math.log(refined.w) - math.log(gt.w)
    ah = math.log(refined.h) - math.log(gt.h)
    value = huber(aw, cfg.huber_delta) + huber(ah, cfg.huber_delta)
    grad = np.zeros(4)
    grad[2] = huber_deriv(aw, cfg.huber_delta) / refined.w
    grad[3] = huber_deriv(ah, cfg.huber_delta) / refined.h
    return value, grad


def combine_losses(
    ce: float, geo: float, rank: float, dist: float, scale: float, cfg: LossConfig
) -> tuple[float, float, float]:
    """Weighted (rerank, refine, total) sums; fsum keeps the totals exact."""
    rerank = math.fsum([ce, cfg.lambda_geo * geo, cfg.lambda_rank * rank])
    refine = math.fsum([cfg.lambda_dist * dist, cfg.lambda_scale * scale])
    total = math.fsum(
        [ce, cfg.lambda_geo * geo, cfg.lambda_rank * rank,
         cfg.lambda_dist * dist, cfg.lambda_scale * scale]
    )
    return rerank, refine, total


@dataclass(frozen=True)
class LossBundle:
    """All loss terms for one frame plus upstream gradients for both heads."""

    ce: float
    geo: float
    rank: float
    dist: float
    scale: float
    rerank: float
    refine: float
    total: float
    d_logits: np.ndarray
    d_refined: np.ndarray


def loss_total(
    logits: np.ndarray,
    valid: np.ndarray | None,
    boxes: Sequence[BBox],
    errors: np.ndarray,
    k_star: int,
    refined: BBox,
    gt: BBox,
    dims: FrameDims,
    cfg: LossConfig,
    regress: bool = True,
) -> LossBundle:
    """Evaluate the full stack and fold the weights into the two gradients.

    With regress=False the box-regression terms (dist, scale) are dropped,
    which the trainer does whenever the selected candidate has no overlap
    with the ground truth: regressing a correction from a box that missed
    the object entirely only teaches the refinement head noise.
    """
    ce, d_ce = loss_ce(logits, valid, k_star)
    geo, d_geo = loss_geo(logits, valid, boxes, gt, cfg)
    rank, d_rank = loss_rank(logits, valid, errors, cfg)
    if regress:
        dist, d_dist = loss_dist(refined, gt, dims, cfg)
        scale, d_scale = loss_scale(refined, gt, cfg)
    else:
        dist, d_dist = 0.0, np.zeros(4)
        scale, d_scale = 0.0, np.zeros(4)
    rerank, refine, total = combine_losses(ce, geo, rank, dist, scale, cfg)
    return LossBundle(
        ce=ce,
        geo=geo,
        rank=rank,
        dist=dist,
        scale=scale,
        rerank=rerank,
        refine=refine,
        total=total,
        d_logits=d_ce + cfg.lambda_geo * d_geo + cfg.lambda_rank * d_rank,
        d_refined=cfg.lambda_dist * d_dist + cfg.lambda_scale * d_scale,
    )


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def numerical_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    arrays: dict[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of a scalar function of named float64 arrays."""
    grads = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise ValidationError(f"array {name} must be float64 for differencing")
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            f_plus = f(arrays)
            flat[i] = keep - step
            f_minus = f(arrays)
            flat[i] = keep
            grad_flat[i] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = grad
    return grads


def max_rel_error(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    floor: float = 1e-3,
) -> float:
    """max |a - n| / max(|a|, |n|, floor) over every entry of every array."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def grad_check(
    f: Callable[[dict[str, np.ndarray]], float],
    arrays: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Compare analytic gradients to central differences; returns the worst
    relative error."""
    numeric = numerical_gradient(f, arrays, step=step)
    missing = set(analytic) ^ set(numeric)
    if missing:
        raise ValidationError(f"gradient name mismatch: {sorted(missing)}")
    return max_rel_error(analytic, numeric, floor=floor)
