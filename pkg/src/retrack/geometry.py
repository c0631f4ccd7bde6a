"""Box geometry: IoU, center error, polar refinement and motion descriptors.

Boxes are axis-aligned, in continuous pixel coordinates, stored center-size
as (cx, cy, w, h). Frame origin is the top-left corner, x grows right,
y grows down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import NoProposalsError, ValidationError

SELECTION_RULES = ("conf", "min_err", "max_iou")


class FrameDims(NamedTuple):
    """Frame size in pixels."""

    w: int
    h: int

    @property
    def diag(self) -> float:
        return math.hypot(self.w, self.h)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, center-size parameterization."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"box {name} is not finite: {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) with x0 < x1, y0 < y1."""
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BBox":
        cx, cy, w, h = (float(v) for v in a)
        return cls(cx, cy, w, h)

    def scaled(self, factor: float) -> "BBox":
        """Uniformly rescale all four coordinates (pixel <-> grid transfer)."""
        return BBox(self.cx * factor, self.cy * factor, self.w * factor, self.h * factor)


def map_to_level(box: BBox, stride: int) -> BBox:
    """Project a pixel-space box onto a feature grid with the given stride."""
    return box.scaled(1.0 / float(stride))


def rescale_box(box: BBox, src: FrameDims, dst: FrameDims) -> BBox:
    """Transfer a box between frames of different resolution (per axis)."""
    sx = dst.w / src.w
    sy = dst.h / src.h
    return BBox(box.cx * sx, box.cy * sy, box.w * sx, box.h * sy)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def center_error(a: BBox, b: BBox) -> float:
    """Euclidean distance between box centers, in pixels."""
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


@dataclass(frozen=True)
class PolarCorrection:
    """Step of length `step` along angle `theta` plus per-axis size scaling.

    theta is in radians (0 points along +x, pi/2 along +y); scale factors
    multiply width and height.
    """

    theta: float
    step: float
    scale_w: float
    scale_h: float

    def __post_init__(self):
        for name in ("theta", "step", "scale_w", "scale_h"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"correction {name} is not finite")
        if self.step < 0:
            raise ValidationError(f"step must be non-negative, got {self.step}")
        if self.scale_w <= 0 or self.scale_h <= 0:
            raise ValidationError("scale factors must be positive")


def polar_update(box: BBox, corr: PolarCorrection, dims: FrameDims | None = None) -> BBox:
    """Apply a polar correction to a box.

    The center moves by step*(cos theta, sin theta) and the sides are scaled.
    When `dims` is given the center is clamped into the frame; sides are always
    clamped to at least one pixel.
    """
    cx = box.cx + corr.step * math.cos(corr.theta)
    cy = box.cy + corr.step * math.sin(corr.theta)
    if dims is not None:
        cx = min(max(cx, 0.0), float(dims.w))
        cy = min(max(cy, 0.0), float(dims.h))
    w = max(box.w * corr.scale_w, 1.0)
    h = max(box.h * corr.scale_h, 1.0)
    return BBox(cx, cy, w, h)


def motion_descriptor(current: BBox, reference: BBox, dims: FrameDims) -> np.ndarray:
    """12-entry geometric descriptor of a candidate box against a reference.

    Layout: both boxes with centers/sides normalized by frame size (8), the
    normalized center displacement (2), and log side ratios (2). Identical
    boxes give zero displacement and zero log ratios.
    """
    w, h = float(dims.w), float(dims.h)
    return np.array(
        [
            current.cx / w,
            current.cy / h,
            current.w / w,
            current.h / h,
            reference.cx / w,
            reference.cy / h,
            reference.w / w,
            reference.h / h,
            (current.cx - reference.cx) / w,
            (current.cy - reference.cy) / h,
            math.log(current.w / reference.w),
            math.log(current.h / reference.h),
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class ProposalSet:
    """Detector output for one frame: boxes with confidences, capacity k.

    Entries are kept sorted by descending confidence (stable under ties).
    """

    t: int
    boxes: tuple[BBox, ...]
    confs: tuple[float, ...]
    k: int

    def __post_init__(self):
        if len(self.boxes) != len(self.confs):
            raise ValidationError("boxes and confidences differ in length")
        if self.k <= 0:
            raise ValidationError(f"capacity must be positive, got {self.k}")
        if len(self.boxes) > self.k:
            raise ValidationError(f"{len(self.boxes)} proposals exceed capacity {self.k}")
        for c in self.confs:
            if not math.isfinite(c):
                raise ValidationError("confidence is not finite")
        if any(a < b for a, b in zip(self.confs, self.confs[1:])):
            raise ValidationError("confidences must be sorted descending")

    @classmethod
    def build(cls, t: int, entries: Sequence[tuple[BBox, float]], k: int) -> "ProposalSet":
        """Construct from unordered (box, confidence) pairs; sorts stably."""
        order = sorted(range(len(entries)), key=lambda i: -entries[i][1])
        boxes = tuple(entries[i][0] for i in order)
        confs = tuple(float(entries[i][1]) for i in order)
        return cls(t=t, boxes=boxes, confs=confs, k=k)

    def __len__(self) -> int:
        return len(self.boxes)


def select_box(proposals: ProposalSet, rule: str, gt: BBox | None = None) -> int:
    """Pick one proposal index by rule; ties break toward the lowest index.

    Rules: "conf" (highest confidence), "min_err" (smallest center error to
    gt), "max_iou" (largest IoU with gt). The oracle rules require gt.
    """
    if len(proposals) == 0:
        raise NoProposalsError(f"no proposals in frame {proposals.t}")
    if rule not in SELECTION_RULES:
        raise ValidationError(f"unknown selection rule {rule!r}")
    if rule == "conf":
        scores = np.array(proposals.confs)
        return int(np.argmax(scores))
    if gt is None:
        raise ValidationError(f"rule {rule!r} needs a ground-truth box")
    if rule == "min_err":
        errs = np.array([center_error(b, gt) for b in proposals.boxes])
        return int(np.argmin(errs))
    overlaps = np.array([iou(b, gt) for b in proposals.boxes])
    return int(np.argmax(overlaps))
