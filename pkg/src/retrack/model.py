"""Candidate reranking head and polar box refinement head.

Both heads are small enough to run on plain numpy with hand-written backward
passes; the gradient test suite checks every path against central finite
differences.

Reranking is multi-head dot-product attention with the reference embedding as
the query and candidate embeddings as keys and values: per head the softmaxed
similarity alpha_k weights each candidate's own value vector, the per-head
slices are concatenated, mixed by an output matrix, squashed by tanh, and read
out as one scalar logit per candidate. Candidates excluded by the validity
mask get -inf logits and contribute nothing to any gradient.

Refinement maps the selected candidate's embedding plus a 12-entry geometric
descriptor through a one-hidden-layer MLP to a polar correction: an unbounded
angle, a step length d_max * sigmoid(raw) with d_max = 10% of the frame
diagonal, and per-axis scale factors exp(clamp(raw, +-ln 2)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .exceptions import LabelParseError, NoProposalsError, ValidationError
from .features import N_CHANNELS, ProjectionParams, init_projection, positional_table
from .geometry import BBox, FrameDims, PolarCorrection, polar_update

G_DIM = 12

LN2 = math.log(2.0)

PARAMS_FORMAT_VERSION = 1


@dataclass
class RerankParams:
    """Attention weights; w_q/w_k/w_v are (heads, d_k, d_emb)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (d_emb, heads * d_k)
    w_s: np.ndarray  # (d_emb,)
    b_s: np.ndarray  # scalar, shape ()

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_emb(self) -> int:
        return self.w_q.shape[2]


@dataclass
class RefineParams:
    """One-hidden-layer MLP from concat(embedding, descriptor) to 4 raws."""

    w1: np.ndarray  # (hidden, d_emb + G_DIM)
    b1: np.ndarray
    w2: np.ndarray  # (4, hidden)
    b2: np.ndarray


@dataclass
class TrackerParams:
    """Every trainable array of the tracker, plus fixed buffers."""

    proj: ProjectionParams
    rerank: RerankParams
    refine: RefineParams

    def items(self):
        """Canonical (name, array) order used by the optimizer and the
        serializer; the positional table is a fixed buffer and not listed."""
        for level in sorted(self.proj.weights):
            yield f"proj.{level}", self.proj.weights[level]
        for name in ("w_q", "w_k", "w_v", "w_o", "w_s", "b_s"):
            yield f"rerank.{name}", getattr(self.rerank, name)
        for name in ("w1", "b1", "w2", "b2"):
            yield f"refine.{name}", getattr(self.refine, name)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_rerank(
    rng: np.random.Generator, d_emb: int, n_heads: int, d_k: int
) -> RerankParams:
    return RerankParams(
        w_q=_uniform(rng, (n_heads, d_k, d_emb), d_emb),
        w_k=_uniform(rng, (n_heads, d_k, d_emb), d_emb),
        w_v=_uniform(rng, (n_heads, d_k, d_emb), d_emb),
        w_o=_uniform(rng, (d_emb, n_heads * d_k), n_heads * d_k),
        w_s=_uniform(rng, (d_emb,), d_emb),
        b_s=np.zeros(()),
    )


def init_refine(rng: np.random.Generator, d_emb: int, hidden: int) -> RefineParams:
    d_in = d_emb + G_DIM
    # Start the angle away from zero. With a zero bias every initial step
    # points along +x and the early refinement gradients push the shared
    # projection weights in one direction, which empirically destabilizes
    # joint training; an off-axis start avoids that degeneracy.
    b2 = np.zeros(4)
    b2[0] = -3.0
    return RefineParams(
        w1=_uniform(rng, (hidden, d_in), d_in),
        b1=np.zeros(hidden),
        w2=_uniform(rng, (4, hidden), hidden),
        b2=b2,
    )


def init_params(
    seed: int,
    d_emb: int = 64,
    n_heads: int = 4,
    d_k: int = 16,
    hidden: int = 128,
    pool: int = 7,
) -> TrackerParams:
    rng = np.random.default_rng(seed)
    return TrackerParams(
        proj=init_projection(rng, d_emb, pool),
        rerank=init_rerank(rng, d_emb, n_heads, d_k),
        refine=init_refine(rng, d_emb, hidden),
    )


# ---------------------------------------------------------------------------
# reranking


@dataclass
class RerankCache:
    f_ref: np.ndarray
    cands: np.ndarray
    valid: np.ndarray
    q: np.ndarray  # (H, d_k)
    keys: np.ndarray  # (H, K, d_k)
    values: np.ndarray  # (H, K, d_k)
    alpha: np.ndarray  # (H, K)
    mixed: np.ndarray  # (K, H * d_k)
    squash: np.ndarray  # (K, d_emb), tanh of the mixed projection


def rerank_forward(
    f_ref: np.ndarray,
    cands: np.ndarray,
    params: RerankParams,
    valid: np.ndarray | None = None,
) -> tuple[np.ndarray, RerankCache]:
    """Score candidates against the reference; -inf logits when masked out.

    cands is (K, d_emb); valid is a boolean mask (default: all valid) and at
    least one candidate must survive it. The attention softmax runs over the
    valid candidates only.
    """
    cands = np.asarray(cands, dtype=np.float64)
    if cands.ndim != 2 or cands.shape[1] != params.d_emb:
        raise ValidationError(f"candidates must be (K, {params.d_emb}), got {cands.shape}")
    k_total = cands.shape[0]
    if valid is None:
        valid = np.ones(k_total, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (k_total,):
            raise ValidationError("validity mask length mismatch")
    if not valid.any():
        raise NoProposalsError("all candidates are masked out")

    n_heads, d_k = params.n_heads, params.d_k
    q = np.einsum("hde,e->hd", params.w_q, f_ref)
    keys = np.einsum("hde,ke->hkd", params.w_k, cands)
    values = np.einsum("hde,ke->hkd", params.w_v, cands)
    scores = np.einsum("hkd,hd->hk", keys, q) / math.sqrt(d_k)

    alpha = np.zeros((n_heads, k_total))
    sub = scores[:, valid]
    sub = np.exp(sub - sub.max(axis=1, keepdims=True))
    alpha[:, valid] = sub / sub.sum(axis=1, keepdims=True)

    # per-candidate mixing: each candidate keeps its own attended value slice
    mixed = (alpha[:, :, None] * values).transpose(1, 0, 2).reshape(k_total, -1)
    squash = np.tanh(mixed @ params.w_o.T)
    logits = squash @ params.w_s + float(params.b_s)
    logits = np.where(valid, logits, -np.inf)
    return logits, RerankCache(
        f_ref=np.asarray(f_ref, dtype=np.float64),
        cands=cands,
        valid=valid,
        q=q,
        keys=keys,
        values=values,
        alpha=alpha,
        mixed=mixed,
        squash=squash,
    )


def rerank_backward(
    cache: RerankCache, params: RerankParams, d_logits: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of sum(d_logits * logits) w.r.t. weights and embeddings.

    Returns (weight grads keyed like RerankParams fields, d_f_ref, d_cands).
    Upstream gradient entries on masked candidates are ignored; masked
    candidates receive exactly zero embedding gradient.
    """
    valid = cache.valid
    d_logits = np.where(valid, np.asarray(d_logits, dtype=np.float64), 0.0)
    n_heads, d_k = params.n_heads, params.d_k
    k_total = cache.cands.shape[0]

    d_b = d_logits.sum()
    d_ws = cache.squash.T @ d_logits
    d_squash = np.outer(d_logits, params.w_s)
    d_mix = d_squash * (1.0 - cache.squash**2)
    d_wo = d_mix.T @ cache.mixed
    d_mixed = (d_mix @ params.w_o).reshape(k_total, n_heads, d_k).transpose(1, 0, 2)

    d_alpha = np.einsum("hkd,hkd->hk", d_mixed, cache.values)
    d_values = cache.alpha[:, :, None] * d_mixed

    # softmax over the valid set, per head
    inner = np.sum(cache.alpha * d_alpha, axis=1, keepdims=True)
    d_scores = cache.alpha * (d_alpha - inner)
    d_scores /= math.sqrt(d_k)

    d_q = np.einsum("hk,hkd->hd", d_scores, cache.keys)
    d_keys = d_scores[:, :, None] * cache.q[:, None, :]

    d_wq = np.einsum("hd,e->hde", d_q, cache.f_ref)
    d_fref = np.einsum("hde,hd->e", params.w_q, d_q)
    d_wk = np.einsum("hkd,ke->hde", d_keys, cache.cands)
    d_wv = np.einsum("hkd,ke->hde", d_values, cache.cands)
    d_cands = np.einsum("hkd,hde->ke", d_keys, params.w_k)
    d_cands += np.einsum("hkd,hde->ke", d_values, params.w_v)

    grads = {
        "w_q": d_wq,
        "w_k": d_wk,
        "w_v": d_wv,
        "w_o": d_wo,
        "w_s": d_ws,
        "b_s": np.asarray(d_b),
    }
    return grads, d_fref, d_cands


def rerank_argmax(logits: np.ndarray) -> int:
    """Highest finite logit; ties break toward the lowest index."""
    finite = np.isfinite(logits)
    if not finite.any():
        raise NoProposalsError("no finite logits to select from")
    masked = np.where(finite, logits, -np.inf)
    return int(np.argmax(masked))


# ---------------------------------------------------------------------------
# refinement


def max_step(dims: FrameDims) -> float:
    """Cap on the polar step length: 10% of the frame diagonal."""
    return 0.1 * dims.diag


@dataclass
class RefineCache:
    x: np.ndarray
    h_pre: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray
    sig_d: float
    d_max: float
    base: BBox
    corr: PolarCorrection
    pass_through: np.ndarray  # clamp masks for (cx, cy, w, h)


def refine_forward(
    f_sel: np.ndarray,
    g: np.ndarray,
    base: BBox,
    params: RefineParams,
    dims: FrameDims,
) -> tuple[PolarCorrection, BBox, RefineCache]:
    """Predict and apply a polar correction to the selected box."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (G_DIM,):
        raise ValidationError(f"descriptor must have {G_DIM} entries, got {g.shape}")
    x = np.concatenate([np.asarray(f_sel, dtype=np.float64), g])
    h_pre = params.w1 @ x + params.b1
    hidden = np.maximum(h_pre, 0.0)
    raw = params.w2 @ hidden + params.b2

    theta = float(raw[0])
    sig_d = float(expit(raw[1]))
    d_max = max_step(dims)
    step = d_max * sig_d
    s_w = math.exp(min(max(float(raw[2]), -LN2), LN2))
    s_h = math.exp(min(max(float(raw[3]), -LN2), LN2))
    corr = PolarCorrection(theta=theta, step=step, scale_w=s_w, scale_h=s_h)
    refined = polar_update(base, corr, dims)

    cx_free = base.cx + step * math.cos(theta)
    cy_free = base.cy + step * math.sin(theta)
    pass_through = np.array(
        [
            1.0 if 0.0 <= cx_free <= dims.w else 0.0,
            1.0 if 0.0 <= cy_free <= dims.h else 0.0,
            1.0 if base.w * s_w >= 1.0 else 0.0,
            1.0 if base.h * s_h >= 1.0 else 0.0,
        ]
    )
    cache = RefineCache(
        x=x,
        h_pre=h_pre,
        hidden=hidden,
        raw=raw,
        sig_d=sig_d,
        d_max=d_max,
        base=base,
        corr=corr,
        pass_through=pass_through,
    )
    return corr, refined, cache


def refine_backward(
    cache: RefineCache, params: RefineParams, d_box: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Backward through the MLP and the polar update.

    d_box is the upstream gradient on the refined (cx, cy, w, h); coordinates
    pinned by a clamp propagate nothing. Returns (weight grads, d_f_sel, d_g).
    """
    d_box = np.asarray(d_box, dtype=np.float64) * cache.pass_through
    theta, step = cache.corr.theta, cache.corr.step
    s_w, s_h = cache.corr.scale_w, cache.corr.scale_h

    d_step = d_box[0] * math.cos(theta) + d_box[1] * math.sin(theta)
    d_theta = step * (-d_box[0] * math.sin(theta) + d_box[1] * math.cos(theta))
    d_raw = np.zeros(4)
    d_raw[0] = d_theta
    d_raw[1] = d_step * cache.d_max * cache.sig_d * (1.0 - cache.sig_d)
    # exp(clamp(.)): derivative is the scale itself inside the clamp window
    d_raw[2] = d_box[2] * cache.base.w * s_w if abs(cache.raw[2]) < LN2 else 0.0
    d_raw[3] = d_box[3] * cache.base.h * s_h if abs(cache.raw[3]) < LN2 else 0.0

    d_w2 = np.outer(d_raw, cache.hidden)
    d_b2 = d_raw
    d_hidden = params.w2.T @ d_raw
    d_hpre = d_hidden * (cache.h_pre > 0.0)
    d_w1 = np.outer(d_hpre, cache.x)
    d_b1 = d_hpre
    d_x = params.w1.T @ d_hpre

    grads = {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}
    d_emb = cache.x.size - G_DIM
    return grads, d_x[:d_emb], d_x[d_emb:]


# ---------------------------------------------------------------------------
# serialization


def _hyper(params: TrackerParams) -> dict:
    return {
        "d_emb": params.rerank.d_emb,
        "n_heads": params.rerank.n_heads,
        "d_k": params.rerank.d_k,
        "hidden": params.refine.w1.shape[0],
        "pool": params.proj.pool,
        "channels": N_CHANNELS,
        "levels": sorted(params.proj.weights),
    }


def save_params(params: TrackerParams, path, seed: int | None = None) -> None:
    """Concatenated little-endian float32 arrays plus a JSON manifest.

    The manifest (at `path` + ".json") lists entry names, shapes, and offsets
    in canonical order, the hyperparameters needed to rebuild the fixed
    buffers, and the format version.
    """
    path = Path(path)
    entries = []
    offset = 0
    blobs = []
    for name, arr in params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        offset += arr.size
        blobs.append(blob)
    manifest = {
        "format_version": PARAMS_FORMAT_VERSION,
        "seed": seed,
        "hyper": _hyper(params),
        "entries": entries,
    }
    path.write_bytes(b"".join(blobs))
    Path(str(path) + ".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_params(path) -> TrackerParams:
    """Rebuild TrackerParams from the float32 file and its manifest."""
    path = Path(path)
    manifest_path = Path(str(path) + ".json")
    if not manifest_path.exists():
        raise LabelParseError("missing params manifest", path=str(manifest_path))
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != PARAMS_FORMAT_VERSION:
        raise LabelParseError(
            f"unsupported params format {manifest.get('format_version')!r}",
            path=str(manifest_path),
        )
    hyper = manifest["hyper"]
    raw = path.read_bytes()
    if len(raw) % 4 != 0:
        raise LabelParseError("params file is not whole float32 words", path=str(path))
    flat = np.frombuffer(raw, dtype="<f4")
    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > flat.size:
            raise LabelParseError("params file shorter than manifest", path=str(path))
        arrays[entry["name"]] = (
            flat[start : start + size].astype(np.float64).reshape(shape)
        )
    try:
        proj = ProjectionParams(
            weights={level: arrays[f"proj.{level}"] for level in hyper["levels"]},
            posenc=positional_table(hyper["pool"], hyper["channels"]),
            pool=hyper["pool"],
        )
        rerank = RerankParams(*(arrays[f"rerank.{n}"] for n in ("w_q", "w_k", "w_v", "w_o", "w_s", "b_s")))
        refine = RefineParams(*(arrays[f"refine.{n}"] for n in ("w1", "b1", "w2", "b2")))
    except KeyError as exc:
        raise LabelParseError(f"manifest missing entry {exc}", path=str(manifest_path))
    return TrackerParams(proj=proj, rerank=rerank, refine=refine)
