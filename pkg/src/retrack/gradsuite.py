"""Seeded finite-difference checks for every hand-written gradient.

Each check builds a small random instance, computes the analytic gradients,
and compares them to central differences, returning the worst relative
error. `run_suite` aggregates over many instances; `corrupted_control`
deliberately tampers with an analytic gradient and must report a large
error, guarding the checker itself against false passes.
"""

from __future__ import annotations

import numpy as np

from .features import build_pyramid, fuse_backward, fuse_embedding, init_projection
from .geometry import BBox, FrameDims, ProposalSet
from .losses import (
    LossConfig,
    grad_check,
    loss_ce,
    loss_dist,
    loss_geo,
    loss_rank,
    loss_scale,
    max_rel_error,
    numerical_gradient,
)
from .model import (
    init_refine,
    init_rerank,
    refine_backward,
    refine_forward,
    rerank_backward,
    rerank_forward,
)
from .synth import SyntheticSequence
from .tracker import PyramidCache, step_forward_backward

PASS_THRESHOLD = 1e-4

END_TO_END_THRESHOLD = 1e-3

CORRUPT_THRESHOLD = 1e-2


def _random_boxes(rng, n, span=64.0):
    return [
        BBox(
            float(rng.uniform(10.0, span - 10.0)),
            float(rng.uniform(10.0, span - 10.0)),
            float(rng.uniform(6.0, 20.0)),
            float(rng.uniform(6.0, 20.0)),
        )
        for _ in range(n)
    ]


def _random_mask(rng, n):
    valid = rng.random(n) < 0.7
    if not valid.any():
        valid[int(rng.integers(n))] = True
    return valid


def check_loss_ce(rng) -> float:
    n = 6
    logits = rng.normal(0.0, 1.0, n)
    valid = _random_mask(rng, n)
    k_star = int(rng.choice(np.flatnonzero(valid)))
    _, analytic = loss_ce(logits, valid, k_star)
    return grad_check(
        lambda a: loss_ce(a["logits"], valid, k_star)[0],
        {"logits": logits},
        {"logits": analytic},
    )


def check_loss_geo(rng) -> float:
    n = 6
    logits = rng.normal(0.0, 1.0, n)
    valid = _random_mask(rng, n)
    boxes = _random_boxes(rng, n)
    gt = _random_boxes(rng, 1)[0]
    cfg = LossConfig()
    _, analytic = loss_geo(logits, valid, boxes, gt, cfg)
    return grad_check(
        lambda a: loss_geo(a["logits"], valid, boxes, gt, cfg)[0],
        {"logits": logits},
        {"logits": analytic},
    )


def check_loss_rank(rng) -> float:
    n = 7
    logits = rng.normal(0.0, 1.0, n)
    valid = _random_mask(rng, n)
    errors = rng.uniform(2.0, 40.0, n)
    cfg = LossConfig()
    _, analytic = loss_rank(logits, valid, errors, cfg)
    return grad_check(
        lambda a: loss_rank(a["logits"], valid, errors, cfg)[0],
        {"logits": logits},
        {"logits": analytic},
    )


def check_loss_dist(rng) -> float:
    dims = FrameDims(96, 64)
    box = np.array([rng.uniform(20, 70), rng.uniform(15, 50), rng.uniform(6, 20), rng.uniform(6, 20)])
    gt = _random_boxes(rng, 1, span=64.0)[0]
    cfg = LossConfig()
    _, analytic = loss_dist(BBox.from_array(box), gt, dims, cfg)
    return grad_check(
        lambda a: loss_dist(BBox.from_array(a["box"]), gt, dims, cfg)[0],
        {"box": box},
        {"box": analytic},
    )


def check_loss_scale(rng) -> float:
    box = np.array([30.0, 30.0, rng.uniform(6, 20), rng.uniform(6, 20)])
    gt = _random_boxes(rng, 1)[0]
    cfg = LossConfig()
    _, analytic = loss_scale(BBox.from_array(box), gt, cfg)
    return grad_check(
        lambda a: loss_scale(BBox.from_array(a["box"]), gt, cfg)[0],
        {"box": box},
        {"box": analytic},
    )


def check_rerank(rng) -> float:
    d_emb, n_heads, d_k, n = 6, 2, 3, 5
    params = init_rerank(rng, d_emb, n_heads, d_k)
    f_ref = rng.normal(0.0, 1.0, d_emb)
    cands = rng.normal(0.0, 1.0, (n, d_emb))
    valid = _random_mask(rng, n)
    contract = rng.normal(0.0, 1.0, n) * valid

    arrays = {
        "w_q": params.w_q,
        "w_k": params.w_k,
        "w_v": params.w_v,
        "w_o": params.w_o,
        "w_s": params.w_s,
        "b_s": params.b_s.reshape(()),
        "f_ref": f_ref,
        "cands": cands,
    }

    def objective(_):
        logits, _cache = rerank_forward(f_ref, cands, params, valid)
        return float(np.sum(contract[valid] * logits[valid]))

    _, cache = rerank_forward(f_ref, cands, params, valid)
    grads, d_fref, d_cands = rerank_backward(cache, params, contract)
    analytic = dict(grads)
    analytic["f_ref"] = d_fref
    analytic["cands"] = d_cands
    return grad_check(objective, arrays, analytic)


def check_refine(rng) -> float:
    d_emb, hidden = 6, 8
    dims = FrameDims(64, 48)
    params = init_refine(rng, d_emb, hidden)
    f_sel = rng.normal(0.0, 1.0, d_emb)
    g = rng.normal(0.0, 0.5, 12)
    base = BBox(
        float(rng.uniform(24, 40)),
        float(rng.uniform(18, 30)),
        float(rng.uniform(8, 16)),
        float(rng.uniform(8, 16)),
    )
    contract = rng.normal(0.0, 1.0, 4)

    arrays = {
        "w1": params.w1,
        "b1": params.b1,
        "w2": params.w2,
        "b2": params.b2,
        "f_sel": f_sel,
        "g": g,
    }

    def objective(_):
        _, refined, _cache = refine_forward(f_sel, g, base, params, dims)
        return float(contract @ refined.as_array())

    _, _, cache = refine_forward(f_sel, g, base, params, dims)
    grads, d_fsel, d_g = refine_backward(cache, params, contract)
    analytic = dict(grads)
    analytic["f_sel"] = d_fsel
    analytic["g"] = d_g
    return grad_check(objective, arrays, analytic)


def check_projection(rng) -> float:
    d_emb, pool = 6, 2
    frame = rng.random((24, 32))
    pyramid = build_pyramid(frame)
    proj = init_projection(rng, d_emb, pool)
    box = BBox(16.0 + rng.uniform(-4, 4), 12.0 + rng.uniform(-3, 3), 10.0, 8.0)
    contract = rng.normal(0.0, 1.0, d_emb)

    arrays = {str(level): proj.weights[level] for level in sorted(proj.weights)}

    def objective(_):
        emb, _cache = fuse_embedding(pyramid, box, proj)
        return float(contract @ emb)

    _, cache = fuse_embedding(pyramid, box, proj)
    grads = fuse_backward(cache, contract)
    analytic = {str(level): grads[level] for level in grads}
    return grad_check(objective, arrays, analytic)


def _tiny_sequence(rng):
    """Two-frame scene small enough for end-to-end differencing."""
    from .model import init_params

    dims = FrameDims(48, 32)
    frames = [rng.random((32, 48)).astype(np.float32) for _ in range(2)]
    gt_boxes = [
        BBox(22.0, 16.0, 10.0, 8.0),
        BBox(24.0, 17.0, 10.0, 8.0),
    ]
    proposals = []
    for t, gt in enumerate(gt_boxes):
        entries = []
        for _ in range(3):
            entries.append(
                (
                    BBox(
                        float(np.clip(gt.cx + rng.normal(0, 2.5), 8, 40)),
                        float(np.clip(gt.cy + rng.normal(0, 2.0), 6, 26)),
                        float(gt.w * np.exp(rng.normal(0, 0.1))),
                        float(gt.h * np.exp(rng.normal(0, 0.1))),
                    ),
                    float(rng.uniform(0.2, 0.9)),
                )
            )
        proposals.append(ProposalSet.build(t=t, entries=entries, k=4))
    seq = SyntheticSequence(
        dims=dims, frames=frames, gt_boxes=gt_boxes, proposals=proposals, k=4
    )
    params = init_params(int(rng.integers(1 << 31)), d_emb=6, n_heads=2, d_k=3, hidden=8, pool=2)
    return seq, params


def check_train_step(rng) -> float:
    """End-to-end: total loss gradient w.r.t. every trainable array."""
    seq, params = _tiny_sequence(rng)
    pyramids = PyramidCache(seq)
    cfg = LossConfig()
    result = step_forward_backward(seq, 1, 0, params, cfg, pyramids)
    if result.skipped:
        # measure-zero with this recipe; treat as an automatic failure
        return float("inf")
    arrays = dict(params.items())

    def objective(_):
        res = step_forward_backward(seq, 1, 0, params, cfg, pyramids)
        return res.bundle.total

    numeric = numerical_gradient(objective, arrays)
    return max_rel_error(result.grads, numeric)


LOSS_CHECKS = {
    "loss_ce": check_loss_ce,
    "loss_geo": check_loss_geo,
    "loss_rank": check_loss_rank,
    "loss_dist": check_loss_dist,
    "loss_scale": check_loss_scale,
}

MODEL_CHECKS = {
    "rerank_backward": check_rerank,
    "refine_backward": check_refine,
    "projection_backward": check_projection,
}

END_TO_END_CHECKS = {"train_step": check_train_step}

ALL_CHECKS = {**LOSS_CHECKS, **MODEL_CHECKS, **END_TO_END_CHECKS}


def run_check(name: str, seed: int, n_instances: int) -> float:
    """Worst relative error of one named check over seeded instances."""
    fn = ALL_CHECKS[name]
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng(seed * 100003 + i)
        worst = max(worst, fn(rng))
    return worst


def run_suite(seed: int = 0, n_instances: int = 10, end_to_end: int = 2) -> dict[str, float]:
    """Worst relative error per check; end-to-end runs fewer instances."""
    out = {}
    for name in {**LOSS_CHECKS, **MODEL_CHECKS}:
        out[name] = run_check(name, seed, n_instances)
    for name in END_TO_END_CHECKS:
        out[name] = run_check(name, seed, end_to_end)
    return out


def corrupted_control(seed: int = 0) -> float:
    """Rel. error of a deliberately wrong gradient; must exceed 1e-2."""
    rng = np.random.default_rng(seed)
    n = 6
    logits = rng.normal(0.0, 1.0, n)
    valid = np.ones(n, dtype=bool)
    k_star = 2
    _, analytic = loss_ce(logits, valid, k_star)
    tampered = analytic * 1.5 + 0.05
    return grad_check(
        lambda a: loss_ce(a["logits"], valid, k_star)[0],
        {"logits": logits},
        {"logits": tampered},
    )


def threshold_for(name: str) -> float:
    return END_TO_END_THRESHOLD if name in END_TO_END_CHECKS else PASS_THRESHOLD
