"""Tracking loop: temporally conditioned training and online inference.

Training draws a gap n from a categorical distribution, anchors the
reference on frame r = t - n (clipped to the sequence start), embeds the
oracle-best proposal of frame r as the reference, scores frame t's proposals
with the rerank head, refines the winner, and backpropagates the full loss
stack through both heads into the projections. Inference replays the same
data path with n = 1 and the previous *selected* output box as reference, so
train and test share one code path.

Optimization is plain momentum SGD with sequential per-frame updates in a
deterministic order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import NoProposalsError, ValidationError
from .features import FeaturePyramid, build_pyramid, fuse_backward, fuse_embedding
from .geometry import BBox, center_error, iou, motion_descriptor, select_box
from .heatmap import HeatmapConfig, render_step
from .losses import LossBundle, LossConfig, loss_total
from .model import (
    TrackerParams,
    init_params,
    rerank_argmax,
    rerank_backward,
    rerank_forward,
    refine_backward,
    refine_forward,
)

DEFAULT_GAPS = (1, 2, 4, 8, 16, 32)
DEFAULT_GAP_PROBS = (0.4, 0.2, 0.1, 0.1, 0.1, 0.1)


@dataclass(frozen=True)
class GapDistribution:
    """Categorical distribution over temporal training gaps."""

    gaps: tuple[int, ...] = DEFAULT_GAPS
    probs: tuple[float, ...] = DEFAULT_GAP_PROBS

    def __post_init__(self):
        if len(self.gaps) != len(self.probs) or len(self.gaps) == 0:
            raise ValidationError("gaps and probs must be equal-length and non-empty")
        if any(g < 1 for g in self.gaps):
            raise ValidationError("gaps must be at least 1")
        if len(set(self.gaps)) != len(self.gaps):
            raise ValidationError("gaps must be distinct")
        if any(p < 0 for p in self.probs):
            raise ValidationError("probabilities must be non-negative")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValidationError(f"probabilities sum to {sum(self.probs)}, not 1")


def sample_gap(dist: GapDistribution, rng: np.random.Generator) -> int:
    return int(rng.choice(dist.gaps, p=dist.probs))


def clip_reference(t: int, n: int, t_min: int = 0) -> int:
    """Reference index t - n, clipped so it never precedes the first frame."""
    if n < 1:
        raise ValidationError("gap must be at least 1")
    return max(t_min, t - n)


class PyramidCache:
    """Lazily built per-frame feature pyramids for one sequence."""

    def __init__(self, seq):
        self._seq = seq
        self._cache: dict[int, FeaturePyramid] = {}

    def __call__(self, t: int) -> FeaturePyramid:
        if t not in self._cache:
            self._cache[t] = build_pyramid(self._seq.frames[t])
        return self._cache[t]


@dataclass
class StepResult:
    """Outcome of one training step; grads is None when skipped."""

    t: int
    skipped: bool
    reason: str = ""
    n: int = 0
    r: int = 0
    k_star: int = -1
    k_hat: int = -1
    bundle: LossBundle | None = None
    grads: dict[str, np.ndarray] | None = None


def train_step(
    seq,
    t: int,
    params: TrackerParams,
    loss_cfg: LossConfig,
    gaps: GapDistribution,
    rng: np.random.Generator,
    pyramids: PyramidCache,
) -> StepResult:
    """One full training step on target frame t: draw a gap, then run the
    deterministic forward/backward pass against the clipped reference."""
    n = sample_gap(gaps, rng)
    result = step_forward_backward(seq, t, clip_reference(t, n), params, loss_cfg, pyramids)
    result.n = n
    return result


def step_forward_backward(
    seq,
    t: int,
    r: int,
    params: TrackerParams,
    loss_cfg: LossConfig,
    pyramids: PyramidCache,
) -> StepResult:
    """Forward/backward pass for target frame t against reference frame r.

    Skips when the target frame has no proposals or ground truth, when no
    proposal overlaps the ground truth, or when the reference frame has no
    proposals to anchor on.
    """
    pset = seq.proposals[t]
    if len(pset) == 0:
        return StepResult(t=t, skipped=True, reason="no proposals")
    gt = seq.gt_boxes[t]
    if gt is None or seq.gt_boxes[r] is None:
        return StepResult(t=t, skipped=True, reason="missing ground truth", r=r)
    valid = np.array([iou(b, gt) > 0.0 for b in pset.boxes])
    if not valid.any():
        return StepResult(t=t, skipped=True, reason="no valid candidates", r=r)

    ref_set = seq.proposals[r]
    if len(ref_set) == 0:
        return StepResult(t=t, skipped=True, reason="empty reference frame", r=r)
    ref_box = ref_set.boxes[select_box(ref_set, "min_err", seq.gt_boxes[r])]

    dims = seq.dims
    f_ref, ref_cache = fuse_embedding(pyramids(r), ref_box, params.proj)
    pyr_t = pyramids(t)
    cand_pairs = [fuse_embedding(pyr_t, b, params.proj) for b in pset.boxes]
    cands = np.stack([f for f, _ in cand_pairs])

    # Attention runs over every candidate, exactly as at inference time.
    # Restricting the softmax to overlap-positive candidates here would leave
    # distractor logits uncalibrated and the scores would not transfer to
    # tracking; the overlap mask therefore lives in the losses only.
    logits, rr_cache = rerank_forward(f_ref, cands, params.rerank)
    errors = np.array([center_error(b, gt) for b in pset.boxes])
    k_star = int(np.argmin(np.where(valid, errors, np.inf)))
    k_hat = rerank_argmax(logits)

    g = motion_descriptor(pset.boxes[k_hat], ref_box, dims)
    _, refined, rf_cache = refine_forward(
        cands[k_hat], g, pset.boxes[k_hat], params.refine, dims
    )
    bundle = loss_total(
        logits,
        valid,
        pset.boxes,
        errors,
        k_star,
        refined,
        gt,
        dims,
        loss_cfg,
        regress=bool(valid[k_hat]),
    )

    rr_grads, d_fref, d_cands = rerank_backward(rr_cache, params.rerank, bundle.d_logits)
    rf_grads, d_fsel, _ = refine_backward(rf_cache, params.refine, bundle.d_refined)
    d_cands = d_cands.copy()
    d_cands[k_hat] += d_fsel

    grads = {f"rerank.{k}": v for k, v in rr_grads.items()}
    grads.update({f"refine.{k}": v for k, v in rf_grads.items()})
    proj_grads = {
        level: g_lvl for level, g_lvl in fuse_backward(ref_cache, d_fref).items()
    }
    for k, (_, cache) in enumerate(cand_pairs):
        if np.any(d_cands[k]):
            for level, g_lvl in fuse_backward(cache, d_cands[k]).items():
                proj_grads[level] = proj_grads[level] + g_lvl
    grads.update({f"proj.{level}": g_lvl for level, g_lvl in proj_grads.items()})
    return StepResult(
        t=t,
        skipped=False,
        r=r,
        k_star=k_star,
        k_hat=k_hat,
        bundle=bundle,
        grads=grads,
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-4
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")


@dataclass
class EpochStats:
    """Means of the loss terms over the steps actually taken."""

    epoch: int
    n_steps: int
    n_skipped: int
    ce: float
    geo: float
    rank: float
    dist: float
    scale: float
    total: float


def train(
    sequences,
    params: TrackerParams,
    loss_cfg: LossConfig | None = None,
    gaps: GapDistribution | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
) -> list[EpochStats]:
    """Momentum-SGD training over whole sequences, updating params in place.

    Frames are visited sequentially (each sequence in order, frames t >= 1 in
    order) with one parameter update per non-skipped frame; a fresh generator
    seeded with `seed` drives the gap draws, so runs are reproducible.
    """
    loss_cfg = loss_cfg or LossConfig()
    gaps = gaps or GapDistribution()
    train_cfg = train_cfg or TrainConfig()
    if hasattr(sequences, "frames"):
        sequences = [sequences]
    rng = np.random.default_rng(seed)
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    caches = [PyramidCache(seq) for seq in sequences]
    history = []
    for epoch in range(train_cfg.epochs):
        sums = np.zeros(6)
        n_steps = 0
        n_skipped = 0
        for seq, pyramids in zip(sequences, caches):
            for t in range(1, len(seq.frames)):
                result = train_step(seq, t, params, loss_cfg, gaps, rng, pyramids)
                if result.skipped:
                    n_skipped += 1
                    continue
                n_steps += 1
                b = result.bundle
                sums += (b.ce, b.geo, b.rank, b.dist, b.scale, b.total)
                for name, arr in params.items():
                    vel = velocity[name]
                    vel *= train_cfg.momentum
                    vel += result.grads[name]
                    arr -= train_cfg.lr * vel
        denom = max(n_steps, 1)
        history.append(
            EpochStats(
                epoch=epoch,
                n_steps=n_steps,
                n_skipped=n_skipped,
                ce=sums[0] / denom,
                geo=sums[1] / denom,
                rank=sums[2] / denom,
                dist=sums[3] / denom,
                scale=sums[4] / denom,
                total=sums[5] / denom,
            )
        )
    return history


@dataclass
class TrackedFrame:
    """Per-frame tracking record.

    held marks frames bridged without proposals (the previous output box is
    carried). order is the candidate ranking by descending rerank logit, or
    None when no scoring happened (init and held frames).
    """

    t: int
    selected: BBox
    refined: BBox
    k: int = -1
    logit: float = 0.0
    held: bool = False
    order: np.ndarray | None = None


@dataclass
class TrackResult:
    frames: list[TrackedFrame]
    heatmaps: list[np.ndarray] = field(default_factory=list)

    @property
    def boxes(self) -> list[BBox]:
        return [f.refined for f in self.frames]

    @property
    def orders(self) -> list[np.ndarray | None]:
        return [f.order for f in self.frames]


def track(
    seq,
    params: TrackerParams,
    loss_cfg: LossConfig | None = None,
    init: str = "conf",
    use_refine: bool = True,
    heat_cfg: HeatmapConfig | None = None,
    pyramids: PyramidCache | None = None,
) -> TrackResult:
    """Run the tracker over one sequence.

    init "conf" starts from the detector's top-confidence proposal of the
    first frame; init "gt" starts from the ground-truth box (tracking
    protocol). Each later frame scores all proposals against the previous
    output box embedded on the previous frame, picks the argmax, and (when
    use_refine) applies the polar correction. Frames without proposals hold
    the previous box. With heat_cfg, per-frame attention heatmaps are
    rendered from the output boxes (scaled to the heatmap grid).
    """
    if init not in ("conf", "gt"):
        raise ValidationError(f"unknown init mode {init!r}")
    if len(seq.frames) == 0:
        raise ValidationError("cannot track an empty sequence")
    pyramids = pyramids or PyramidCache(seq)
    dims = seq.dims

    frames: list[TrackedFrame] = []
    heatmaps: list[np.ndarray] = []
    heat_state = None

    if init == "gt":
        first = seq.gt_boxes[0]
        held0 = False
    else:
        pset0 = seq.proposals[0]
        if len(pset0) == 0:
            raise NoProposalsError("first frame has no proposals for conf init")
        first = pset0.boxes[select_box(pset0, "conf")]
        held0 = False
    frames.append(TrackedFrame(t=0, selected=first, refined=first, held=held0))

    prev_box = first
    for t in range(1, len(seq.frames)):
        pset = seq.proposals[t]
        if len(pset) == 0:
            frames.append(
                TrackedFrame(t=t, selected=prev_box, refined=prev_box, held=True)
            )
            continue
        f_ref, _ = fuse_embedding(pyramids(t - 1), prev_box, params.proj)
        pyr_t = pyramids(t)
        cands = np.stack(
            [fuse_embedding(pyr_t, b, params.proj)[0] for b in pset.boxes]
        )
        logits, _ = rerank_forward(f_ref, cands, params.rerank)
        k_hat = rerank_argmax(logits)
        selected = pset.boxes[k_hat]
        if use_refine:
            g = motion_descriptor(selected, prev_box, dims)
            _, refined, _ = refine_forward(
                cands[k_hat], g, selected, params.refine, dims
            )
        else:
            refined = selected
        order = np.argsort(-logits, kind="stable")
        frames.append(
            TrackedFrame(
                t=t,
                selected=selected,
                refined=refined,
                k=k_hat,
                logit=float(logits[k_hat]),
                order=order,
            )
        )
        prev_box = refined

    if heat_cfg is not None:
        from .geometry import rescale_box

        for rec in frames:
            box = rescale_box(rec.refined, dims, heat_cfg.dims)
            heat, heat_state = render_step([box], heat_state, heat_cfg)
            heatmaps.append(heat)
    return TrackResult(frames=frames, heatmaps=heatmaps)


class RerankTracker(BaseEstimator):
    """sklearn-style wrapper: fit on sequences, predict box trajectories.

    Parameters mirror the functional API; `loss` and `gaps` take the
    corresponding config objects (None = defaults). fit initializes
    parameters from `seed` and trains in place; predict runs tracking and
    returns one TrackResult per sequence.
    """

    def __init__(
        self,
        d_emb: int = 64,
        n_heads: int = 4,
        d_k: int = 16,
        hidden: int = 128,
        pool: int = 7,
        epochs: int = 10,
        lr: float = 1e-4,
        momentum: float = 0.9,
        seed: int = 0,
        init: str = "conf",
        use_refine: bool = True,
        loss: LossConfig | None = None,
        gaps: GapDistribution | None = None,
    ):
        self.d_emb = d_emb
        self.n_heads = n_heads
        self.d_k = d_k
        self.hidden = hidden
        self.pool = pool
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.seed = seed
        self.init = init
        self.use_refine = use_refine
        self.loss = loss
        self.gaps = gaps

    def fit(self, X, y=None):
        params = init_params(
            self.seed,
            d_emb=self.d_emb,
            n_heads=self.n_heads,
            d_k=self.d_k,
            hidden=self.hidden,
            pool=self.pool,
        )
        self.history_ = train(
            X,
            params,
            loss_cfg=self.loss,
            gaps=self.gaps,
            train_cfg=TrainConfig(
                epochs=self.epochs, lr=self.lr, momentum=self.momentum
            ),
            seed=self.seed,
        )
        self.params_ = params
        return self

    def predict(self, X):
        if hasattr(X, "frames"):
            X = [X]
        return [
            track(
                seq,
                self.params_,
                loss_cfg=self.loss,
                init=self.init,
                use_refine=self.use_refine,
            )
            for seq in X
        ]
