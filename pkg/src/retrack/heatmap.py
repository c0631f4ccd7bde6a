"""Ground-truth attention heatmaps from box streams.

Each frame contributes truncated anisotropic Gaussian kernels (one per box,
unit peak, sigma proportional to box size). Per-frame densities are folded
into an exponentially decayed accumulator, smoothed, and robustly normalized
to [0, 1] by a high percentile.

All grids are float64 (H, W) arrays; float32 appears only in the raw file
format. Grids can be written both as 8-bit PNG and as a raw float32 format
with a 16-byte header (8-byte magic, u32 width, u32 height, little-endian).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import LabelParseError, ValidationError
from .geometry import BBox, FrameDims
from .validation import (
    check_grid,
    check_odd,
    check_positive,
    check_probability,
    check_unit_range,
)

EPS = 1e-8

RAW_MAGIC = b"RTHMF32\x00"
RAW_HEADER = struct.Struct("<8sII")

AREA_COMP_MODES = ("none", "sqrt")


def robust_quantile(values: np.ndarray, q: float) -> float:
    """Linear-interpolation quantile shared by the normalizer and NSS mask."""
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"quantile must lie in [0, 1], got {q}")
    return float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))


@dataclass(frozen=True)
class HeatmapConfig:
    """Knobs of the heatmap pipeline.

    alpha: decay of the temporal accumulator, M_t = (1-alpha)*M_{t-1} + D_t.
    scale: kernel sigma as a fraction of the box side.
    smooth_k: odd tap count of the per-frame Gaussian smoother (1 = identity).
    percentile: robust normalization percentile, in (0, 100].
    width, height: output grid size in pixels.
    area_comp: per-box weight, "sqrt" -> 1/sqrt(max(w*h, 1)), or "none".
    inflation: box sides are inflated by (1 + inflation) before the kernel
        sigmas are computed; area compensation always uses the raw sides.
    """

    alpha: float = 0.22
    scale: float = 0.45
    smooth_k: int = 9
    percentile: float = 99.5
    width: int = 960
    height: int = 540
    area_comp: str = "sqrt"
    inflation: float = 0.0

    def __post_init__(self):
        check_probability(self.alpha, "alpha")
        if self.alpha == 0.0:
            raise ValidationError("alpha must be positive")
        check_positive(self.scale, "scale")
        check_odd(self.smooth_k, "smooth_k")
        if not 0.0 < self.percentile <= 100.0:
            raise ValidationError(f"percentile must lie in (0, 100], got {self.percentile}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValidationError("width and height must be positive")
        if self.area_comp not in AREA_COMP_MODES:
            raise ValidationError(f"area_comp must be one of {AREA_COMP_MODES}")
        if self.inflation < 0:
            raise ValidationError(f"inflation must be non-negative, got {self.inflation}")

    @property
    def dims(self) -> FrameDims:
        return FrameDims(int(self.width), int(self.height))


def box_kernel(box: BBox, cfg: HeatmapConfig) -> np.ndarray:
    """Unit-peak anisotropic Gaussian for one box on the full output grid.

    sigma_x = max(1, scale * w'), sigma_y = max(1, scale * h') where w', h'
    are the inflated sides. Support is truncated at +-3 sigma per axis; the
    grid is exactly zero outside that window.
    """
    w, h = cfg.dims
    out = np.zeros((h, w), dtype=np.float64)
    infl = 1.0 + cfg.inflation
    sx = max(1.0, cfg.scale * box.w * infl)
    sy = max(1.0, cfg.scale * box.h * infl)
    x0 = max(0, int(np.ceil(box.cx - 3.0 * sx)))
    x1 = min(w - 1, int(np.floor(box.cx + 3.0 * sx)))
    y0 = max(0, int(np.ceil(box.cy - 3.0 * sy)))
    y1 = min(h - 1, int(np.floor(box.cy + 3.0 * sy)))
    if x0 > x1 or y0 > y1:
        return out
    gx = np.exp(-0.5 * ((np.arange(x0, x1 + 1) - box.cx) / sx) ** 2)
    gy = np.exp(-0.5 * ((np.arange(y0, y1 + 1) - box.cy) / sy) ** 2)
    out[y0 : y1 + 1, x0 : x1 + 1] = np.outer(gy, gx)
    return out


def _area_weight(box: BBox, cfg: HeatmapConfig) -> float:
    if cfg.area_comp == "none":
        return 1.0
    return 1.0 / np.sqrt(max(box.area, 1.0))


def frame_density(boxes: Sequence[BBox], cfg: HeatmapConfig) -> np.ndarray:
    """Sum of area-weighted kernels for one frame; zeros when no boxes."""
    w, h = cfg.dims
    out = np.zeros((h, w), dtype=np.float64)
    for box in boxes:
        out += _area_weight(box, cfg) * box_kernel(box, cfg)
    return out


def accumulate(prev: np.ndarray, density: np.ndarray, alpha: float) -> np.ndarray:
    """One decay step: (1 - alpha) * prev + density."""
    prev = check_grid(prev, "accumulator")
    density = check_grid(density, "density")
    if prev.shape != density.shape:
        raise ValidationError("accumulator and density shapes differ")
    return (1.0 - alpha) * prev + density


def _gauss_taps(k: int) -> np.ndarray:
    # OpenCV's sigma convention for a k-tap kernel; k=1 degenerates to [1].
    sigma = 0.3 * ((k - 1) * 0.5 - 1.0) + 0.8
    x = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def smooth(grid: np.ndarray, k: int) -> np.ndarray:
    """Separable k-tap Gaussian smoothing with replicated borders."""
    check_odd(k, "smooth_k")
    grid = check_grid(grid, "grid")
    if k == 1:
        return grid.copy()
    taps = _gauss_taps(k)
    tmp = correlate1d(grid, taps, axis=0, mode="nearest")
    return correlate1d(tmp, taps, axis=1, mode="nearest")


def robust_normalize(grid: np.ndarray, percentile: float) -> np.ndarray:
    """Divide by the given percentile (floored by eps) and clip to [0, 1]."""
    grid = check_grid(grid, "grid")
    q = robust_quantile(grid, percentile / 100.0)
    return np.clip(grid / max(q, EPS), 0.0, 1.0)


def generate_sequence(
    frame_boxes: Sequence[Sequence[BBox]], cfg: HeatmapConfig
) -> list[np.ndarray]:
    """Heatmaps for a whole sequence of per-frame box lists.

    The accumulator starts at zero and carries the unsmoothed sum; smoothing
    and normalization are applied per frame on the way out.
    """
    state = None
    out = []
    for boxes in frame_boxes:
        heat, state = render_step(boxes, state, cfg)
        out.append(heat)
    return out


def render_step(
    boxes: Sequence[BBox], state: np.ndarray | None, cfg: HeatmapConfig
) -> tuple[np.ndarray, np.ndarray]:
    """One online step: fold `boxes` into the accumulator, emit the heatmap.

    Returns (heatmap, new_state); pass state=None to start a sequence. This
    is the inference-time entry point, usually with a single tracked box.
    """
    w, h = cfg.dims
    if state is None:
        state = np.zeros((h, w), dtype=np.float64)
    elif state.shape != (h, w):
        raise ValidationError(f"state shape {state.shape} != grid {(h, w)}")
    state = accumulate(state, frame_density(boxes, cfg), cfg.alpha)
    heat = robust_normalize(smooth(state, cfg.smooth_k), cfg.percentile)
    return heat, state


# ---------------------------------------------------------------------------
# file formats


def save_heatmap_png(heat: np.ndarray, path) -> None:
    """8-bit grayscale PNG, values round(255 * H)."""
    heat = check_grid(heat, "heatmap")
    check_unit_range(heat, "heatmap")
    img = np.rint(255.0 * heat).astype(np.uint8)
    Image.fromarray(img, mode="L").save(Path(path), format="PNG")


def load_heatmap_png(path) -> np.ndarray:
    img = Image.open(Path(path)).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_heatmap_raw(heat: np.ndarray, path) -> None:
    """Raw float32 grid: 8-byte magic, u32 width, u32 height, then rows."""
    heat = check_grid(heat, "heatmap")
    h, w = heat.shape
    with open(Path(path), "wb") as f:
        f.write(RAW_HEADER.pack(RAW_MAGIC, w, h))
        f.write(heat.astype("<f4").tobytes())


def load_heatmap_raw(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < RAW_HEADER.size:
        raise LabelParseError("truncated heatmap file", path=str(path))
    magic, w, h = RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise LabelParseError(f"bad magic {magic!r}", path=str(path))
    body = blob[RAW_HEADER.size :]
    if len(body) != 4 * w * h:
        raise LabelParseError(
            f"payload is {len(body)} bytes, expected {4 * w * h}", path=str(path)
        )
    grid = np.frombuffer(body, dtype="<f4").reshape(h, w)
    return grid.astype(np.float64)


class HeatmapGenerator(TransformerMixin, BaseEstimator):
    """Estimator facade over the heatmap pipeline.

    transform(X) maps a sequence of per-frame box lists (pixel-space BBox,
    already in output coordinates) to the list of normalized heatmaps.
    Stateless across calls; fit is a no-op kept for pipeline compatibility.
    """

    def __init__(
        self,
        alpha: float = 0.22,
        scale: float = 0.45,
        smooth_k: int = 9,
        percentile: float = 99.5,
        width: int = 960,
        height: int = 540,
        area_comp: str = "sqrt",
        inflation: float = 0.0,
    ):
        self.alpha = alpha
        self.scale = scale
        self.smooth_k = smooth_k
        self.percentile = percentile
        self.width = width
        self.height = height
        self.area_comp = area_comp
        self.inflation = inflation

    def _config(self) -> HeatmapConfig:
        return HeatmapConfig(
            alpha=self.alpha,
            scale=self.scale,
            smooth_k=self.smooth_k,
            percentile=self.percentile,
            width=self.width,
            height=self.height,
            area_comp=self.area_comp,
            inflation=self.inflation,
        )

    def fit(self, X=None, y=None):
        self._config()  # validates parameters
        return self

    def transform(self, X: Sequence[Sequence[BBox]]) -> list[np.ndarray]:
        return generate_sequence(X, self._config())
