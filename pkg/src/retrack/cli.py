"""Command-line harness.

Subcommands: simulate, gen-heatmaps, eval, oracle-table, topk, train, track,
grad-check. Shared flags: --config (INI file), --seed (overrides the config
seeds), --out (output directory), --threads.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure (non-finite values).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, default_config, parse_config
from .exceptions import (
    ConfigError,
    LabelParseError,
    NoProposalsError,
    NumericalError,
    RetrackError,
    SequenceMismatchError,
    ValidationError,
)
from .geometry import BBox, center_error, iou, rescale_box, select_box
from .gradsuite import (
    CORRUPT_THRESHOLD,
    corrupted_control,
    run_suite,
    threshold_for,
)
from .heatmap import (
    generate_sequence,
    load_heatmap_png,
    load_heatmap_raw,
    save_heatmap_png,
    save_heatmap_raw,
)
from .labels import load_sequence, parse_labels_dir, record_to_box, save_sequence
from .metrics import MetricReport, evaluate_pair, format_csv
from .model import init_params, load_params, save_params
from .synth import generate, recall_at_k
from .tracker import track, train

SELECTION_RULES = ("conf", "min_err", "max_iou")


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_flags(sp: argparse.ArgumentParser, need_out: bool = False) -> None:
    sp.add_argument("--config", metavar="PATH", type=Path, help="INI config file")
    sp.add_argument(
        "--seed", metavar="N", type=int, help="override the run and scene seeds"
    )
    sp.add_argument(
        "--out", metavar="DIR", type=Path, required=need_out, help="output directory"
    )
    sp.add_argument("--threads", metavar="N", type=int, help="worker threads")


def build_parser() -> _Parser:
    parser = _Parser(prog="retrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("simulate", help="render a synthetic sequence to disk")
    _common_flags(sp, need_out=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gen-heatmaps", help="labels directory -> heatmap files")
    _common_flags(sp, need_out=True)
    sp.add_argument("--labels", metavar="DIR", type=Path, required=True)
    sp.set_defaults(func=cmd_gen_heatmaps)

    sp = sub.add_parser("eval", help="score predicted heatmaps against references")
    _common_flags(sp)
    sp.add_argument("--pred", metavar="DIR", type=Path, required=True)
    sp.add_argument("--gt", metavar="DIR", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("oracle-table", help="per-rule selection diagnostics")
    _common_flags(sp)
    sp.add_argument("--data", metavar="DIR", type=Path, help="sequence directory (default: synthesize from config)")
    sp.add_argument("--params", metavar="PATH", type=Path, help="add rerank_only/full tracker rows")
    sp.add_argument("--init", choices=("conf", "gt"), default="gt")
    sp.add_argument("--no-metrics", action="store_true", help="skip heatmap metric columns")
    sp.set_defaults(func=cmd_oracle_table)

    sp = sub.add_parser("topk", help="recall@k curves for candidate orderings")
    _common_flags(sp)
    sp.add_argument("--data", metavar="DIR", type=Path)
    sp.add_argument("--params", metavar="PATH", type=Path, help="add the trained rerank ordering")
    sp.add_argument("--init", choices=("conf", "gt"), default="gt")
    sp.add_argument("--match", choices=("center", "iou"), default="center")
    sp.add_argument("--threshold", type=float, default=20.0)
    sp.set_defaults(func=cmd_topk)

    sp = sub.add_parser("train", help="train the rerank/refine parameters")
    _common_flags(sp, need_out=True)
    sp.add_argument("--data", metavar="DIR", type=Path)
    sp.add_argument("--init-params", metavar="PATH", type=Path, help="warm-start parameters")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("track", help="run the tracker over a sequence")
    _common_flags(sp, need_out=True)
    sp.add_argument("--data", metavar="DIR", type=Path)
    sp.add_argument("--params", metavar="PATH", type=Path, required=True)
    sp.add_argument("--init", choices=("conf", "gt"), default="conf")
    sp.add_argument("--no-refine", action="store_true")
    sp.add_argument("--render", action="store_true", help="write per-frame heatmaps")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common_flags(sp)
    sp.add_argument("--n", type=int, default=10, help="instances per check")
    sp.set_defaults(func=cmd_grad_check)
    return parser


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(
            cfg,
            run=replace(cfg.run, seed=args.seed),
            scene=replace(cfg.scene, seed=args.seed),
        )
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, run=replace(cfg.run, threads=args.threads))
    return cfg


def _load_data_or_synth(args):
    cfg = _load_config(args)
    if getattr(args, "data", None):
        seq = load_sequence(args.data)
    else:
        seq = generate(cfg.scene)
    return cfg, seq


def _ensure_finite(values, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {what}")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    seq = generate(cfg.scene)
    save_sequence(seq, args.out)
    print(
        f"simulated {len(seq)} frames at {seq.dims.w}x{seq.dims.h} "
        f"(k={seq.k}, seed={cfg.scene.seed}) -> {args.out}"
    )
    return 0


def cmd_gen_heatmaps(args) -> int:
    cfg = _load_config(args)
    hm = cfg.heatmap
    stems_records = parse_labels_dir(args.labels)
    if not stems_records:
        raise LabelParseError("no label files found", path=str(args.labels))
    frame_boxes = [
        [record_to_box(r, hm.dims) for r in records] for _, records in stems_records
    ]
    heats = generate_sequence(frame_boxes, hm)
    args.out.mkdir(parents=True, exist_ok=True)
    for (stem, _), heat in zip(stems_records, heats):
        _ensure_finite(heat, f"heatmap {stem}")
        save_heatmap_png(heat, args.out / f"{stem}.png")
        save_heatmap_raw(heat, args.out / f"{stem}.f32")
    print(f"wrote {len(heats)} heatmaps ({hm.width}x{hm.height}) -> {args.out}")
    return 0


def _heat_stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise NotADirectoryError(f"heatmap directory not found: {directory}")
    stems: dict[str, Path] = {}
    for path in sorted(directory.glob("*.png")):
        stems[path.stem] = path
    for path in sorted(directory.glob("*.f32")):
        stems[path.stem] = path  # raw grids take precedence over png
    return stems


def _load_heat(path: Path) -> np.ndarray:
    if path.suffix == ".f32":
        return load_heatmap_raw(path)
    return load_heatmap_png(path)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    pred = _heat_stems(args.pred)
    gt = _heat_stems(args.gt)
    if not pred or not gt:
        raise LabelParseError(
            "no heatmap files found", path=str(args.pred if not pred else args.gt)
        )
    if set(pred) != set(gt):
        raise SequenceMismatchError(
            f"prediction/reference stems differ: "
            f"{sorted(set(pred) ^ set(gt))[:4]} ..."
        )
    stems = sorted(pred)

    def one(stem: str):
        return evaluate_pair(_load_heat(pred[stem]), _load_heat(gt[stem]))

    threads = cfg.run.threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = np.array(list(pool.map(one, stems)))
    else:
        rows = np.array([one(stem) for stem in stems])
    _ensure_finite(rows, "metrics")
    means = rows.mean(axis=0)
    report = MetricReport(
        nss=float(means[0]),
        cc=float(means[1]),
        sim=float(means[2]),
        mse=float(means[3]),
        mae=float(means[4]),
        n_frames=len(stems),
    )
    csv_text = format_csv([(args.pred.name, report)])
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.csv").write_text(csv_text)
    else:
        print(csv_text, end="")
    print(
        f"frames={report.n_frames} nss={report.nss:.4f} cc={report.cc:.4f} "
        f"sim={report.sim:.4f} mse={report.mse:.6f} mae={report.mae:.6f}"
    )
    return 0


def _carried_heats(boxes, src_dims, hm):
    """Render a heatmap stream from per-frame boxes, carrying gaps."""
    carried = None
    frame_boxes = []
    for box in boxes:
        if box is not None:
            carried = box
        frame_boxes.append(
            [rescale_box(carried, src_dims, hm.dims)] if carried is not None else []
        )
    return generate_sequence(frame_boxes, hm)


def cmd_oracle_table(args) -> int:
    cfg, seq = _load_data_or_synth(args)
    rows = []
    gt_heats = None
    if not args.no_metrics:
        gt_heats = _carried_heats(seq.gt_boxes, seq.dims, cfg.heatmap)

    def add_row(label: str, picks: list[BBox | None]) -> None:
        errs = []
        overlaps = []
        for t, chosen in enumerate(picks):
            gt_box = seq.gt_boxes[t]
            if chosen is None or gt_box is None:
                continue
            errs.append(center_error(chosen, gt_box))
            overlaps.append(iou(chosen, gt_box))
        if not errs:
            raise NoProposalsError("no scorable frames in the sequence")
        row = {
            "rule": label,
            "err": float(np.mean(errs)),
            "iou": float(np.mean(overlaps)),
        }
        if gt_heats is not None:
            from .metrics import evaluate_sequence

            report = evaluate_sequence(_carried_heats(picks, seq.dims, cfg.heatmap), gt_heats)
            row.update(nss=report.nss, cc=report.cc, mae=report.mae)
        rows.append(row)

    for rule in SELECTION_RULES:
        picks: list[BBox | None] = []
        for t in range(len(seq)):
            gt_box = seq.gt_boxes[t]
            pset = seq.proposals[t]
            if gt_box is None or len(pset) == 0:
                picks.append(None)
                continue
            picks.append(pset.boxes[select_box(pset, rule, gt_box)])
        add_row(rule, picks)

    if args.params:
        params = load_params(args.params)
        for label, use_refine in (("rerank_only", False), ("full", True)):
            result = track(
                seq, params, loss_cfg=cfg.loss, init=args.init, use_refine=use_refine
            )
            add_row(label, [rec.refined for rec in result.frames])

    header = ["rule", "err", "iou"] + (["nss", "cc", "mae"] if gt_heats is not None else [])
    print("  ".join(f"{h:>8}" for h in header))
    for row in rows:
        cells = [f"{row['rule']:>8}"] + [f"{row[h]:8.4f}" for h in header[1:]]
        print("  ".join(cells))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        lines = [",".join(header)]
        for row in rows:
            lines.append(
                ",".join([row["rule"]] + [f"{row[h]:.10g}" for h in header[1:]])
            )
        (args.out / "oracle_table.csv").write_text("\n".join(lines) + "\n")
    for row in rows:
        _ensure_finite([row[h] for h in header[1:]], f"oracle row {row['rule']}")
    return 0


def cmd_topk(args) -> int:
    cfg, seq = _load_data_or_synth(args)
    ks = list(range(1, seq.k + 1))
    conf_curve = [
        recall_at_k(seq, k, match=args.match, threshold=args.threshold, start=1)
        for k in ks
    ]
    rerank_curve = None
    if args.params:
        params = load_params(args.params)
        result = track(seq, params, loss_cfg=cfg.loss, init=args.init)
        orders = result.orders
        rerank_curve = [
            recall_at_k(
                seq, k, match=args.match, threshold=args.threshold,
                orders=orders, start=1,
            )
            for k in ks
        ]
    header = ["k", "conf"] + (["rerank"] if rerank_curve else [])
    print("  ".join(f"{h:>8}" for h in header))
    for i, k in enumerate(ks):
        cells = [f"{k:>8}", f"{conf_curve[i]:8.4f}"]
        if rerank_curve:
            cells.append(f"{rerank_curve[i]:8.4f}")
        print("  ".join(cells))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        lines = [",".join(header)]
        for i, k in enumerate(ks):
            row = [str(k), f"{conf_curve[i]:.10g}"]
            if rerank_curve:
                row.append(f"{rerank_curve[i]:.10g}")
            lines.append(",".join(row))
        (args.out / "topk.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.data:
        sequences = [load_sequence(args.data)]
    else:
        sequences = [generate(cfg.scene)]
    if args.init_params:
        params = load_params(args.init_params)
    else:
        m = cfg.model
        params = init_params(
            cfg.run.seed,
            d_emb=m.d_emb,
            n_heads=m.n_heads,
            d_k=m.d_k,
            hidden=m.hidden,
            pool=m.pool,
        )
    history = train(
        sequences,
        params,
        loss_cfg=cfg.loss,
        gaps=cfg.gaps,
        train_cfg=cfg.train,
        seed=cfg.run.seed,
    )
    for ep in history:
        _ensure_finite([ep.total], f"epoch {ep.epoch} loss")
        print(
            f"epoch {ep.epoch}: steps={ep.n_steps} skipped={ep.n_skipped} "
            f"ce={ep.ce:.4f} rank={ep.rank:.4f} dist={ep.dist:.5f} "
            f"scale={ep.scale:.4f} total={ep.total:.4f}"
        )
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "model.bin"
    save_params(params, path, seed=cfg.run.seed)
    print(f"saved parameters -> {path}")
    return 0


def cmd_track(args) -> int:
    cfg, seq = _load_data_or_synth(args)
    params = load_params(args.params)
    heat_cfg = cfg.heatmap if args.render else None
    result = track(
        seq,
        params,
        loss_cfg=cfg.loss,
        init=args.init,
        use_refine=not args.no_refine,
        heat_cfg=heat_cfg,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    lines = ["# t cx cy w h k held"]
    held = 0
    for rec in result.frames:
        box = rec.refined
        _ensure_finite(box.as_array(), f"tracked box at t={rec.t}")
        held += int(rec.held)
        lines.append(
            f"{rec.t} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f} "
            f"{rec.k} {int(rec.held)}"
        )
    (args.out / "boxes.txt").write_text("\n".join(lines) + "\n")
    if heat_cfg is not None:
        heat_dir = args.out / "heat"
        heat_dir.mkdir(exist_ok=True)
        for t, heat in enumerate(result.heatmaps):
            _ensure_finite(heat, f"heatmap at t={t}")
            save_heatmap_png(heat, heat_dir / f"{t:06d}.png")
            save_heatmap_raw(heat, heat_dir / f"{t:06d}.f32")
    print(f"tracked {len(result.frames)} frames ({held} held) -> {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    results = run_suite(
        seed=cfg.run.seed, n_instances=args.n, end_to_end=min(args.n, 2)
    )
    ok = True
    for name in sorted(results):
        err = results[name]
        threshold = threshold_for(name)
        passed = err < threshold
        ok = ok and passed
        print(f"{name:>20}: max rel err {err:.3e} (< {threshold:.0e}) "
              f"{'PASS' if passed else 'FAIL'}")
    control = corrupted_control(cfg.run.seed)
    control_ok = control > CORRUPT_THRESHOLD
    ok = ok and control_ok
    print(f"{'corrupted_control':>20}: max rel err {control:.3e} (> {CORRUPT_THRESHOLD:.0e}) "
          f"{'PASS' if control_ok else 'FAIL'}")
    return 0 if ok else 3


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (
        ConfigError,
        LabelParseError,
        ValidationError,
        NoProposalsError,
        RetrackError,
        FileNotFoundError,
        NotADirectoryError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
