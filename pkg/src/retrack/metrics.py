"""Saliency-style agreement metrics between predicted and reference heatmaps.

Five metrics: NSS, CC, SIM, MSE, MAE. Location-based NSS scores the
z-normalized prediction on the reference's top-5% mask; distribution-based
CC and SIM compare the maps as a whole. All formulas share eps = 1e-8 and
operate on same-shape 2-D grids.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .heatmap import robust_quantile
from .validation import check_grid, check_same_length, check_same_shape

EPS = 1e-8

NSS_MASK_QUANTILE = 0.95

CSV_HEADER = ("sequence_id", "nss", "cc", "sim", "mse", "mae", "n_frames")


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = check_grid(pred, "prediction")
    g = check_grid(target, "target")
    check_same_shape(p, g)
    return p, g


def mae(pred, target) -> float:
    """Mean absolute difference."""
    p, g = _pair(pred, target)
    return float(np.mean(np.abs(p - g)))


def mse(pred, target) -> float:
    """Mean squared difference."""
    p, g = _pair(pred, target)
    return float(np.mean((p - g) ** 2))


def cc(pred, target) -> float:
    """Pearson correlation with an eps-stabilized denominator.

    cc = sum((P - mean P)(G - mean G)) / (std P * std G * N + eps), population
    stds. A constant map zeroes the numerator, so degenerate inputs score ~0
    rather than raising.
    """
    p, g = _pair(pred, target)
    pc = p - p.mean()
    gc = g - g.mean()
    num = float(np.sum(pc * gc))
    den = float(p.std() * g.std() * p.size) + EPS
    return num / den


def sim(pred, target) -> float:
    """Histogram intersection of the l1-normalized maps.

    Each map is clamped at zero and divided by (sum + eps); an all-zero map
    falls back to the uniform distribution. Result is in [0, 1], and 1 is
    approached only by (near-)identical maps.
    """
    p, g = _pair(pred, target)
    return float(np.sum(np.minimum(_l1_normalize(p), _l1_normalize(g))))


def _l1_normalize(grid: np.ndarray) -> np.ndarray:
    clamped = np.maximum(grid, 0.0)
    total = float(clamped.sum())
    if total == 0.0:
        return np.full_like(grid, 1.0 / grid.size)
    return clamped / (total + EPS)


def nss(pred, target) -> float:
    """Mean z-score of the prediction over the target's top-5% mask.

    The mask is F = [G >= Q_0.95(G)] with the shared linear-interpolation
    quantile; the mask count in the denominator is clamped to at least 1.
    A constant prediction has zero z-scores everywhere, hence NSS = 0.
    """
    p, g = _pair(pred, target)
    if float(p.max()) == float(p.min()):
        # Exact-zero convention for constant maps; the mean of identical
        # floats can wobble by one ulp, which the eps division would
        # otherwise amplify to a spurious ~1e-9 score.
        return 0.0
    z = (p - p.mean()) / (p.std() + EPS)
    mask = g >= robust_quantile(g, NSS_MASK_QUANTILE)
    return float(np.sum(z * mask) / max(float(mask.sum()), 1.0))


@dataclass(frozen=True)
class MetricReport:
    """Per-sequence metric means plus the frame count they average."""

    nss: float
    cc: float
    sim: float
    mse: float
    mae: float
    n_frames: int

    def as_row(self, sequence_id: str) -> tuple:
        return (
            sequence_id,
            self.nss,
            self.cc,
            self.sim,
            self.mse,
            self.mae,
            self.n_frames,
        )


def evaluate_pair(pred, target) -> tuple[float, float, float, float, float]:
    """All five metrics for one frame, in CSV column order."""
    p, g = _pair(pred, target)
    return (nss(p, g), cc(p, g), sim(p, g), mse(p, g), mae(p, g))


def evaluate_sequence(preds, targets) -> MetricReport:
    """Arithmetic per-metric means over a frame-aligned pair of sequences."""
    check_same_length(preds, targets)
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty sequence")
    rows = np.array([evaluate_pair(p, g) for p, g in zip(preds, targets)])
    means = rows.mean(axis=0)
    return MetricReport(
        nss=float(means[0]),
        cc=float(means[1]),
        sim=float(means[2]),
        mse=float(means[3]),
        mae=float(means[4]),
        n_frames=len(preds),
    )


def format_csv(rows) -> str:
    """Render (sequence_id, report) pairs as a deterministic CSV document."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for sequence_id, report in rows:
        sid, *values, n_frames = report.as_row(sequence_id)
        writer.writerow([sid, *(f"{v:.10g}" for v in values), n_frames])
    return buf.getvalue()
