"""Dataset I/O: YOLO-style labels, proposal files, and the sequence layout.

Label files hold one `class cx cy w h` line per box, coordinates normalized
to [0, 1] by the frame size. Proposal files are the same geometry prefixed
by a confidence instead of a class. A sequence directory holds
`manifest.json`, `frames/NNNNNN.png`, `labels/NNNNNN.txt`, and
`proposals/NNNNNN.txt`, indexed from zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import LabelParseError
from .geometry import BBox, FrameDims, ProposalSet
from .synth import SyntheticSequence

MANIFEST_NAME = "manifest.json"

SEQUENCE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LabelRecord:
    """One normalized label line."""

    cls: int
    cx: float
    cy: float
    w: float
    h: float


def _parse_floats(tokens, path, line_no):
    try:
        return [float(tok) for tok in tokens]
    except ValueError as exc:
        raise LabelParseError(f"non-numeric field: {exc}", path=str(path), line=line_no)


def _check_geometry(cx, cy, w, h, path, line_no):
    for name, v in (("cx", cx), ("cy", cy)):
        if not 0.0 <= v <= 1.0:
            raise LabelParseError(
                f"{name}={v} outside [0, 1]", path=str(path), line=line_no
            )
    for name, v in (("w", w), ("h", h)):
        if not 0.0 < v <= 1.0:
            raise LabelParseError(
                f"{name}={v} outside (0, 1]", path=str(path), line=line_no
            )


def parse_label_file(path) -> list[LabelRecord]:
    """Parse one label file; empty files mean no boxes in the frame."""
    path = Path(path)
    records = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 5:
            raise LabelParseError(
                f"expected 5 fields, got {len(tokens)}", path=str(path), line=line_no
            )
        cls_raw = tokens[0]
        try:
            cls = int(cls_raw)
        except ValueError:
            raise LabelParseError(
                f"class must be an integer, got {cls_raw!r}", path=str(path), line=line_no
            )
        if cls < 0:
            raise LabelParseError(f"negative class {cls}", path=str(path), line=line_no)
        cx, cy, w, h = _parse_floats(tokens[1:], path, line_no)
        _check_geometry(cx, cy, w, h, path, line_no)
        records.append(LabelRecord(cls=cls, cx=cx, cy=cy, w=w, h=h))
    return records


def parse_proposal_file(path) -> list[tuple[float, LabelRecord]]:
    """Parse `conf cx cy w h` lines into (confidence, record) pairs."""
    path = Path(path)
    out = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 5:
            raise LabelParseError(
                f"expected 5 fields, got {len(tokens)}", path=str(path), line=line_no
            )
        conf, cx, cy, w, h = _parse_floats(tokens, path, line_no)
        if not 0.0 <= conf <= 1.0:
            raise LabelParseError(
                f"confidence {conf} outside [0, 1]", path=str(path), line=line_no
            )
        _check_geometry(cx, cy, w, h, path, line_no)
        out.append((conf, LabelRecord(cls=-1, cx=cx, cy=cy, w=w, h=h)))
    return out


def parse_labels_dir(directory) -> list[tuple[str, list[LabelRecord]]]:
    """All .txt files of a directory in name order, as (stem, records)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise NotADirectoryError(f"label directory not found: {directory}")
    out = []
    for path in sorted(directory.glob("*.txt")):
        out.append((path.stem, parse_label_file(path)))
    return out


def record_to_box(record: LabelRecord, dims: FrameDims) -> BBox:
    """Normalized record to a pixel-space box in the given frame."""
    return BBox(record.cx * dims.w, record.cy * dims.h, record.w * dims.w, record.h * dims.h)


def box_to_record(box: BBox, dims: FrameDims, cls: int = 0) -> LabelRecord:
    """Pixel-space box to a normalized record, clipped into the legal range."""
    return LabelRecord(
        cls=cls,
        cx=float(np.clip(box.cx / dims.w, 0.0, 1.0)),
        cy=float(np.clip(box.cy / dims.h, 0.0, 1.0)),
        w=float(np.clip(box.w / dims.w, 1e-6, 1.0)),
        h=float(np.clip(box.h / dims.h, 1e-6, 1.0)),
    )


def _frame_name(t: int) -> str:
    return f"{t:06d}"


def save_sequence(seq: SyntheticSequence, out_dir) -> None:
    """Write a sequence in the standard directory layout."""
    out_dir = Path(out_dir)
    for sub in ("frames", "labels", "proposals"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": SEQUENCE_FORMAT_VERSION,
        "width": seq.dims.w,
        "height": seq.dims.h,
        "n_frames": len(seq),
        "k": seq.k,
        "seed": seq.seed,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    for t in range(len(seq)):
        name = _frame_name(t)
        img = np.rint(255.0 * np.asarray(seq.frames[t], dtype=np.float64))
        Image.fromarray(img.astype(np.uint8), mode="L").save(
            out_dir / "frames" / f"{name}.png", format="PNG"
        )
        lines = []
        gt = seq.gt_boxes[t]
        if gt is not None:
            r = box_to_record(gt, seq.dims)
            lines.append(f"{r.cls} {r.cx:.8f} {r.cy:.8f} {r.w:.8f} {r.h:.8f}")
        (out_dir / "labels" / f"{name}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
        plines = []
        pset = seq.proposals[t]
        for box, conf in zip(pset.boxes, pset.confs):
            r = box_to_record(box, seq.dims)
            plines.append(f"{conf:.6f} {r.cx:.8f} {r.cy:.8f} {r.w:.8f} {r.h:.8f}")
        (out_dir / "proposals" / f"{name}.txt").write_text(
            "\n".join(plines) + ("\n" if plines else "")
        )


def load_sequence(data_dir) -> SyntheticSequence:
    """Read a sequence directory back into memory.

    Frames are required; a frame's label file may be empty (no ground truth
    that frame) and its proposal file may be empty (detector dropout).
    """
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise LabelParseError("missing manifest", path=str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LabelParseError(f"bad manifest: {exc}", path=str(manifest_path))
    for key in ("width", "height", "n_frames", "k"):
        if key not in manifest:
            raise LabelParseError(f"manifest missing {key!r}", path=str(manifest_path))
    dims = FrameDims(int(manifest["width"]), int(manifest["height"]))
    n_frames = int(manifest["n_frames"])
    k = int(manifest["k"])

    frames = []
    gt_boxes: list[BBox | None] = []
    proposals = []
    for t in range(n_frames):
        name = _frame_name(t)
        frame_path = data_dir / "frames" / f"{name}.png"
        if not frame_path.exists():
            raise LabelParseError("missing frame image", path=str(frame_path))
        img = Image.open(frame_path).convert("L")
        if img.size != (dims.w, dims.h):
            raise LabelParseError(
                f"frame is {img.size}, manifest says {(dims.w, dims.h)}",
                path=str(frame_path),
            )
        frames.append(np.asarray(img, dtype=np.float32) / 255.0)

        label_path = data_dir / "labels" / f"{name}.txt"
        if label_path.exists():
            records = parse_label_file(label_path)
            gt_boxes.append(record_to_box(records[0], dims) if records else None)
        else:
            gt_boxes.append(None)

        prop_path = data_dir / "proposals" / f"{name}.txt"
        entries = []
        if prop_path.exists():
            for conf, rec in parse_proposal_file(prop_path):
                entries.append((record_to_box(rec, dims), conf))
        if len(entries) > k:
            raise LabelParseError(
                f"{len(entries)} proposals exceed manifest capacity {k}",
                path=str(prop_path),
            )
        proposals.append(ProposalSet.build(t=t, entries=entries, k=k))
    return SyntheticSequence(
        dims=dims,
        frames=frames,
        gt_boxes=gt_boxes,
        proposals=proposals,
        k=k,
        seed=manifest.get("seed"),
    )
