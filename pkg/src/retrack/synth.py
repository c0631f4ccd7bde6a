"""Synthetic tracking scenes with a controllable detector.

Scenes render a moving Gaussian blob target over static rectangular
distractors on a plain background. The simulated detector emits, per frame,
a few jittered copies of the ground-truth box, one proposal per distractor,
and uniform random boxes, all with calibrated confidences. With probability
`conf_corrupt` a frame's confidences are corrupted: every ground-truth copy
is demoted below the distractor band, so the raw-confidence rule locks onto
a distractor while geometry-aware rules do not. Occlusion events drop the
ground-truth copies entirely for a few frames.

Everything is driven by one seeded generator: the same config yields
bit-identical sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .geometry import BBox, FrameDims, ProposalSet, center_error, iou
from .validation import check_non_negative, check_probability

# confidence bands: clean gt copy above everything, corrupted gt copies below
# the distractor band, random fillers at the bottom
CONF_GT = (0.80, 0.95)
CONF_GT_EXTRA = (0.55, 0.78)
CONF_DISTRACTOR = (0.30, 0.65)
CONF_RANDOM = (0.05, 0.25)
CONF_CORRUPTED = (0.22, 0.29)
CONF_CORRUPTED_EXTRA = (0.08, 0.20)

N_GT_COPIES = 3

JITTER_MULTIPLIERS = (1.0, 1.6, 2.4)


@dataclass(frozen=True)
class SceneConfig:
    """Scene geometry, motion model, and detector behavior."""

    seed: int = 7
    n_frames: int = 500
    width: int = 256
    height: int = 144
    motion: str = "random_walk"
    teleport_prob: float = 0.02
    n_distractors: int = 3
    jitter_center: float = 8.0
    jitter_logsize: float = 0.12
    bias_x: float = 4.0
    bias_y: float = -3.0
    bias_logw: float = 0.12
    bias_logh: float = 0.12
    conf_corrupt: float = 0.5
    recall_floor: float = 1.0
    k: int = 10
    occlusion_prob: float = 0.0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValidationError("n_frames must be at least 1")
        if self.width < 32 or self.height < 32:
            raise ValidationError("frames must be at least 32x32")
        if self.motion not in ("linear", "random_walk", "teleport"):
            raise ValidationError(f"unknown motion model {self.motion!r}")
        check_probability(self.teleport_prob, "teleport_prob")
        check_probability(self.conf_corrupt, "conf_corrupt")
        check_probability(self.recall_floor, "recall_floor")
        check_probability(self.occlusion_prob, "occlusion_prob")
        check_non_negative(self.jitter_center, "jitter_center")
        check_non_negative(self.jitter_logsize, "jitter_logsize")
        for name in ("bias_x", "bias_y", "bias_logw", "bias_logh"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.n_distractors < 0:
            raise ValidationError("n_distractors must be non-negative")
        if self.k < 1:
            raise ValidationError("k must be at least 1")

    @property
    def dims(self) -> FrameDims:
        return FrameDims(self.width, self.height)


@dataclass
class SyntheticSequence:
    """Frames (float32 grayscale in [0, 1]), ground truth, and proposals."""

    dims: FrameDims
    frames: list[np.ndarray]
    gt_boxes: list[BBox]
    proposals: list[ProposalSet]
    k: int
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.frames)


def generate(cfg: SceneConfig) -> SyntheticSequence:
    """Render a scene and simulate its detector."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    w, h = float(cfg.width), float(cfg.height)

    tw = w * rng.uniform(0.10, 0.16)
    th = h * rng.uniform(0.14, 0.22)
    distractors = _make_distractors(rng, cfg, tw, th)
    background = _background(cfg, distractors)

    margin_x = tw / 2.0 + 2.0
    margin_y = th / 2.0 + 2.0
    pos = np.array(
        [rng.uniform(margin_x, w - margin_x), rng.uniform(margin_y, h - margin_y)]
    )
    heading = rng.uniform(0.0, 2.0 * math.pi)
    speed = rng.uniform(1.0, 2.5)
    vel = speed * np.array([math.cos(heading), math.sin(heading)])

    frames: list[np.ndarray] = []
    gt_boxes: list[BBox] = []
    proposals: list[ProposalSet] = []
    occluded_left = 0
    for t in range(cfg.n_frames):
        pos, vel = _advance(rng, cfg, pos, vel, (margin_x, margin_y))
        gt = BBox(float(pos[0]), float(pos[1]), tw, th)
        frames.append(_render(background, gt))
        gt_boxes.append(gt)

        if occluded_left > 0:
            occluded_left -= 1
            occluded = True
        elif cfg.occlusion_prob > 0 and rng.random() < cfg.occlusion_prob:
            occluded_left = int(rng.integers(0, 3))  # this frame plus 0-2 more
            occluded = True
        else:
            occluded = False
        proposals.append(_detect(rng, cfg, t, gt, distractors, occluded))
    return SyntheticSequence(
        dims=dims,
        frames=frames,
        gt_boxes=gt_boxes,
        proposals=proposals,
        k=cfg.k,
        seed=cfg.seed,
    )


@dataclass(frozen=True)
class _Distractor:
    box: BBox
    value: float


def _make_distractors(rng, cfg: SceneConfig, tw: float, th: float) -> list[_Distractor]:
    out = []
    for _ in range(cfg.n_distractors):
        dw = tw * rng.uniform(0.8, 1.3)
        dh = th * rng.uniform(0.8, 1.3)
        cx = rng.uniform(dw / 2 + 1, cfg.width - dw / 2 - 1)
        cy = rng.uniform(dh / 2 + 1, cfg.height - dh / 2 - 1)
        out.append(_Distractor(BBox(cx, cy, dw, dh), float(rng.uniform(0.45, 0.65))))
    return out


def _background(cfg: SceneConfig, distractors: list[_Distractor]) -> np.ndarray:
    xs = np.arange(cfg.width, dtype=np.float64)
    base = np.tile(0.18 + 0.04 * xs / cfg.width, (cfg.height, 1))
    for d in distractors:
        x0, y0, x1, y1 = d.box.corners
        base[
            max(0, int(round(y0))) : min(cfg.height, int(round(y1))),
            max(0, int(round(x0))) : min(cfg.width, int(round(x1))),
        ] = d.value
    return base


def _render(background: np.ndarray, gt: BBox) -> np.ndarray:
    h, w = background.shape
    sx = gt.w / 3.5
    sy = gt.h / 3.5
    ys = (np.arange(h) - gt.cy) / sy
    xs = (np.arange(w) - gt.cx) / sx
    blob = 0.75 * np.exp(-0.5 * (ys[:, None] ** 2 + xs[None, :] ** 2))
    return np.clip(background + blob, 0.0, 1.0).astype(np.float32)


def _advance(rng, cfg: SceneConfig, pos, vel, margins):
    if cfg.motion in ("random_walk", "teleport"):
        vel = vel + rng.normal(0.0, 0.3, size=2)
        speed = float(np.hypot(*vel))
        if speed > 3.5:
            vel *= 3.5 / speed
    if cfg.motion == "teleport" and rng.random() < cfg.teleport_prob:
        pos = np.array(
            [
                rng.uniform(margins[0], cfg.width - margins[0]),
                rng.uniform(margins[1], cfg.height - margins[1]),
            ]
        )
        return pos, vel
    pos = pos + vel
    # bounce off the frame margins
    for axis, (lo, hi) in enumerate(
        ((margins[0], cfg.width - margins[0]), (margins[1], cfg.height - margins[1]))
    ):
        if pos[axis] < lo:
            pos[axis] = lo + (lo - pos[axis])
            vel[axis] = abs(vel[axis])
        elif pos[axis] > hi:
            pos[axis] = hi - (pos[axis] - hi)
            vel[axis] = -abs(vel[axis])
        pos[axis] = float(np.clip(pos[axis], lo, hi))
    return pos, vel


def _jittered_copy(rng, cfg: SceneConfig, gt: BBox, mult: float) -> BBox:
    # The simulated detector has a systematic localization bias on top of the
    # random jitter, the way anchor grids and loose annotation conventions
    # push real detectors off the object in a repeatable direction.
    jc = rng.normal(0.0, cfg.jitter_center * mult, size=2)
    js = rng.normal(0.0, cfg.jitter_logsize, size=2)
    cx = float(np.clip(gt.cx + cfg.bias_x + jc[0], 1.0, cfg.width - 1.0))
    cy = float(np.clip(gt.cy + cfg.bias_y + jc[1], 1.0, cfg.height - 1.0))
    return BBox(
        cx,
        cy,
        max(gt.w * math.exp(cfg.bias_logw + js[0]), 4.0),
        max(gt.h * math.exp(cfg.bias_logh + js[1]), 4.0),
    )


def _detect(
    rng, cfg: SceneConfig, t: int, gt: BBox, distractors: list[_Distractor], occluded: bool
) -> ProposalSet:
    entries: list[tuple[BBox, float]] = []
    include_gt = (not occluded) and rng.random() < cfg.recall_floor
    if include_gt:
        copies = [
            _jittered_copy(rng, cfg, gt, mult)
            for mult in JITTER_MULTIPLIERS[:N_GT_COPIES]
        ]
        corrupted = rng.random() < cfg.conf_corrupt
        for j, box in enumerate(copies):
            if corrupted:
                band = CONF_CORRUPTED if j == 0 else CONF_CORRUPTED_EXTRA
            else:
                band = CONF_GT if j == 0 else CONF_GT_EXTRA
            entries.append((box, float(rng.uniform(*band))))
    for d in distractors:
        if len(entries) >= cfg.k:
            break
        jc = rng.normal(0.0, 3.0, size=2)
        js = rng.normal(0.0, 0.08, size=2)
        box = BBox(
            float(np.clip(d.box.cx + cfg.bias_x + jc[0], 1.0, cfg.width - 1.0)),
            float(np.clip(d.box.cy + cfg.bias_y + jc[1], 1.0, cfg.height - 1.0)),
            max(d.box.w * math.exp(cfg.bias_logw + js[0]), 4.0),
            max(d.box.h * math.exp(cfg.bias_logh + js[1]), 4.0),
        )
        entries.append((box, float(rng.uniform(*CONF_DISTRACTOR))))
    while len(entries) < cfg.k:
        bw = cfg.width * rng.uniform(0.06, 0.20)
        bh = cfg.height * rng.uniform(0.08, 0.25)
        box = BBox(
            float(rng.uniform(bw / 2 + 1, cfg.width - bw / 2 - 1)),
            float(rng.uniform(bh / 2 + 1, cfg.height - bh / 2 - 1)),
            bw,
            bh,
        )
        entries.append((box, float(rng.uniform(*CONF_RANDOM))))
    return ProposalSet.build(t=t, entries=entries, k=cfg.k)


def recall_at_k(
    seq: SyntheticSequence,
    k: int,
    match: str = "center",
    threshold: float = 20.0,
    orders: list[np.ndarray | None] | None = None,
    start: int = 0,
) -> float:
    """Fraction of frames whose top-k proposals contain a qualifying box.

    match "center": a proposal qualifies when its center is within
    `threshold` px of the target; match "iou": when IoU >= threshold.
    `orders` optionally replaces the confidence ordering with per-frame index
    arrays (None entries count as misses); `start` skips leading frames.
    """
    if match not in ("center", "iou"):
        raise ValidationError(f"unknown match rule {match!r}")
    hits = 0
    total = 0
    for t in range(start, len(seq)):
        total += 1
        pset = seq.proposals[t]
        gt = seq.gt_boxes[t]
        if len(pset) == 0:
            continue
        if match == "center":
            good = [center_error(b, gt) <= threshold for b in pset.boxes]
        else:
            good = [iou(b, gt) >= threshold for b in pset.boxes]
        if orders is not None:
            order = orders[t]
            if order is None:
                continue
            top = list(order[:k])
        else:
            top = list(range(min(k, len(pset))))
        if any(good[i] for i in top):
            hits += 1
    if total == 0:
        raise ValidationError("no frames to score")
    return hits / total
