"""Handcrafted feature pyramid, ROI pooling, and the fused box embedding.

A grayscale frame is turned into 4 channels (local mean, |grad x|, |grad y|,
local variance), average-pooled at strides 8/16/32 into pyramid levels 3-5.
Boxes are pooled from each level by single-sample ROI align, tagged with a
fixed sinusoidal positional table, and linearly projected and summed into one
embedding. Only the per-level projection matrices are trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .exceptions import ValidationError
from .geometry import BBox, FrameDims, map_to_level
from .validation import check_grid, check_unit_range

STRIDES = {3: 8, 4: 16, 5: 32}

N_CHANNELS = 4


@dataclass(frozen=True)
class FeaturePyramid:
    """Channel-last feature grids per level, plus the source frame size."""

    levels: dict[int, np.ndarray]
    dims: FrameDims


def build_pyramid(frame: np.ndarray, strides: dict[int, int] | None = None) -> FeaturePyramid:
    """Compute the pyramid for one frame with values in [0, 1].

    Level shapes use ceiling division of the frame size by the stride; the
    pooling pads with edge replication so border cells average real pixels.
    """
    grid = check_grid(frame, "frame")
    check_unit_range(grid, "frame")
    strides = STRIDES if strides is None else strides
    h, w = grid.shape
    base = _base_channels(grid)
    levels = {
        level: _avg_pool(base, stride) for level, stride in sorted(strides.items())
    }
    return FeaturePyramid(levels=levels, dims=FrameDims(w, h))


def _base_channels(grid: np.ndarray) -> np.ndarray:
    mean = uniform_filter(grid, size=3, mode="nearest")
    gy, gx = np.gradient(grid)
    sq_mean = uniform_filter(grid * grid, size=3, mode="nearest")
    var = np.maximum(sq_mean - mean * mean, 0.0)
    return np.stack([mean, np.abs(gx), np.abs(gy), var], axis=-1)


def _avg_pool(base: np.ndarray, stride: int) -> np.ndarray:
    h, w, c = base.shape
    hs = -(-h // stride)
    ws = -(-w // stride)
    padded = np.pad(
        base, ((0, hs * stride - h), (0, ws * stride - w), (0, 0)), mode="edge"
    )
    return padded.reshape(hs, stride, ws, stride, c).mean(axis=(1, 3))


def roi_align(grid: np.ndarray, box: BBox, pool: int) -> np.ndarray:
    """Pool a (pool, pool, C) patch from a channel-last grid.

    One bilinear sample per bin at the bin center, half-pixel convention
    (cell (i, j) is centered at (j + 0.5, i + 0.5)), border-clamped.
    """
    if grid.ndim != 3:
        raise ValidationError(f"feature grid must be 3-D, got shape {grid.shape}")
    h, w, _ = grid.shape
    x0, y0, x1, y1 = box.corners
    xs = x0 + (np.arange(pool) + 0.5) * (x1 - x0) / pool
    ys = y0 + (np.arange(pool) + 0.5) * (y1 - y0) / pool
    u = np.clip(xs - 0.5, 0.0, w - 1.0)
    v = np.clip(ys - 0.5, 0.0, h - 1.0)
    return _bilinear(grid, v, u)


def _bilinear(grid: np.ndarray, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    h, w, _ = grid.shape
    i0 = np.floor(v).astype(int)
    j0 = np.floor(u).astype(int)
    i0 = np.clip(i0, 0, h - 1)
    j0 = np.clip(j0, 0, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fv = (v - i0)[:, None, None]
    fu = (u - j0)[None, :, None]
    top = grid[i0[:, None], j0[None, :]] * (1 - fu) + grid[i0[:, None], j1[None, :]] * fu
    bot = grid[i1[:, None], j0[None, :]] * (1 - fu) + grid[i1[:, None], j1[None, :]] * fu
    return top * (1 - fv) + bot * fv


def positional_table(pool: int, channels: int = N_CHANNELS) -> np.ndarray:
    """Fixed sinusoidal (pool, pool, channels) table added before projection.

    The first half of the channels encodes the x bin center, the second half
    the y bin center, alternating sin/cos of the normalized coordinate.
    """
    coords = (np.arange(pool) + 0.5) / pool
    table = np.zeros((pool, pool, channels), dtype=np.float64)
    half = channels // 2
    for c in range(channels):
        axis = coords[None, :] if c < half else coords[:, None]
        phase = np.pi * axis
        plane = np.sin(phase) if c % 2 == 0 else np.cos(phase)
        table[:, :, c] = np.broadcast_to(plane, (pool, pool))
    return table


@dataclass
class ProjectionParams:
    """Trainable per-level projections plus the fixed positional table."""

    weights: dict[int, np.ndarray]
    posenc: np.ndarray
    pool: int

    @property
    def d_emb(self) -> int:
        return next(iter(self.weights.values())).shape[0]


def init_projection(
    rng: np.random.Generator,
    d_emb: int,
    pool: int,
    channels: int = N_CHANNELS,
    levels=(3, 4, 5),
) -> ProjectionParams:
    """Uniform(+-1/sqrt(fan_in)) init; the positional table is not trained."""
    fan_in = pool * pool * channels
    bound = 1.0 / np.sqrt(fan_in)
    weights = {
        level: rng.uniform(-bound, bound, size=(d_emb, fan_in)) for level in levels
    }
    return ProjectionParams(
        weights=weights, posenc=positional_table(pool, channels), pool=pool
    )


@dataclass
class FuseCache:
    """Flattened per-level inputs saved for the projection backward pass."""

    inputs: dict[int, np.ndarray]


def fuse_embedding(
    pyramid: FeaturePyramid, box: BBox, proj: ProjectionParams
) -> tuple[np.ndarray, FuseCache]:
    """Sum of per-level projections of the pooled, position-tagged patches."""
    out = np.zeros(proj.d_emb, dtype=np.float64)
    inputs = {}
    for level, weight in sorted(proj.weights.items()):
        patch = roi_align(
            pyramid.levels[level], map_to_level(box, STRIDES[level]), proj.pool
        )
        x = (patch + proj.posenc).ravel()
        inputs[level] = x
        out += weight @ x
    return out, FuseCache(inputs=inputs)


def fuse_backward(cache: FuseCache, d_emb: np.ndarray) -> dict[int, np.ndarray]:
    """Per-level projection gradients for an upstream embedding gradient."""
    return {level: np.outer(d_emb, x) for level, x in cache.inputs.items()}
