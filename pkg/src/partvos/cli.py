"""Command-line entry point: run, eval, track-eval, synth, train."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dataset_io import (
    FrameSequence,
    ObjectSpec,
    SynthSpec,
    load_sequence,
    numeric_key,
    read_mask,
    save_masks,
    synth_sequence,
    write_csv,
)
from .geometry import mask_box
from .metrics import MetricReport, evaluate_sequence, format_summary
from .part_gen import generate_parts
from .pipeline import Pipeline
from .roi_segment import save_model, train_segmenter
from .tracking import iou_recall_curve, read_boxes, read_proposals

log = logging.getLogger("partvos")

EXIT_OK = 0
EXIT_TRACKING_LOST = 2
EXIT_USAGE = 3
EXIT_FAILURE = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2, which is reserved for tracking-lost runs
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="RNG seed (overrides rng_seed)")
    p.add_argument("--workers", type=int, help="worker threads for per-part work")
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. track.peak_min=0.6 (repeatable)")


def _input(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--frames", type=Path, help="directory of numbered frame images")
    src.add_argument("--davis-root", type=Path, help="DAVIS root with JPEGImages/ and Annotations/")
    p.add_argument("--annotations", type=Path, help="directory of indexed mask PNGs (with --frames)")
    p.add_argument("--sequence", help="sequence name (with --davis-root)")
    p.add_argument("--resolution", default="480p", help="DAVIS resolution folder (default 480p)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partvos", description="Online part-based video object segmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="segment a sequence online")
    _input(run)
    _common(run, "output directory for masks, timing.csv and metrics.csv")
    run.add_argument("--proposals", type=Path, help="directory of per-frame '<frame>.txt' box proposals")
    run.add_argument("--mode", choices=("ave", "seg", "seg+tracker"), help="aggregation mode")
    morph = run.add_mutually_exclusive_group()
    morph.add_argument("--morph", dest="morph", action="store_const", const=True,
                       help="close-then-open the output masks (refine.morph)")
    morph.add_argument("--no-morph", dest="morph", action="store_const", const=False,
                       help="disable mask morphology even if the config enables it")

    ev = sub.add_parser("eval", help="J/F metrics of predicted masks against ground truth")
    ev.add_argument("--pred", type=Path, required=True, help="predicted mask dir (or dir of sequence dirs)")
    ev.add_argument("--gt", type=Path, required=True, help="ground-truth mask dir (same layout)")
    _common(ev, "output directory for per-sequence CSVs and summary.txt")

    te = sub.add_parser("track-eval", help="IoU-recall curve of object boxes")
    te.add_argument("--pred", type=Path, required=True, help="predicted boxes, one 'x y w h' line per frame")
    gt = te.add_mutually_exclusive_group(required=True)
    gt.add_argument("--gt", type=Path, help="ground-truth boxes, one line per frame")
    gt.add_argument("--gt-masks", type=Path, help="ground-truth mask dir; boxes are the tight object boxes")
    te.add_argument("--object", type=int, default=1, help="object label in --gt-masks (default 1)")
    _common(te, "output CSV path")

    sy = sub.add_parser("synth", help="write a synthetic test sequence")
    sy.add_argument("--name", default="synth")
    sy.add_argument("--n-frames", type=int, default=30)
    sy.add_argument("--width", type=int, default=854)
    sy.add_argument("--height", type=int, default=480)
    sy.add_argument("--shape", choices=("ellipse", "rectangle"), default="ellipse")
    sy.add_argument("--size", type=float, nargs=2, default=(90.0, 60.0), metavar=("RX", "RY"))
    sy.add_argument("--start", type=float, nargs=2, metavar=("CX", "CY"))
    sy.add_argument("--velocity", type=float, nargs=2, default=(3.0, 2.0), metavar=("DX", "DY"))
    sy.add_argument("--rotation", type=float, default=0.0, help="degrees per frame")
    _common(sy, "output root; writes frames/<name>/ and annotations/<name>/")

    tr = sub.add_parser("train", help="train the part segmenter on frame 0 and save it")
    _input(tr)
    _common(tr, "output directory for model_<instance>.bin")
    return parser


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if getattr(args, "mode", None):
        overrides["agg.mode"] = "ave" if args.mode == "ave" else "seg"
        overrides["refine.gate"] = args.mode == "seg+tracker"
    if getattr(args, "morph", None) is not None:
        overrides["refine.morph"] = args.morph
    return load_config(args.config, overrides)


def _load_input(args) -> FrameSequence:
    if args.frames is not None:
        if args.sequence is not None:
            raise UsageError("argument --sequence: not allowed with argument --frames")
        if args.annotations is None:
            raise UsageError("--frames requires --annotations")
        return load_sequence(args.frames, args.annotations)
    if args.annotations is not None:
        raise UsageError("argument --annotations: not allowed with argument --davis-root")
    if not args.sequence:
        raise UsageError("--davis-root requires --sequence")
    root = args.davis_root
    return load_sequence(
        root / "JPEGImages" / args.resolution / args.sequence,
        root / "Annotations" / args.resolution / args.sequence,
        name=args.sequence,
    )


def _load_proposals(directory: Path | None, seq: FrameSequence) -> dict:
    if directory is None:
        return {}
    out = {}
    for t, fid in enumerate(seq.frame_ids):
        path = directory / f"{fid}.txt"
        if path.exists():
            out[t] = [box for box, _ in read_proposals(path)]
    return out


def cmd_run(args) -> int:
    config = _config(args)
    seq = _load_input(args)
    proposals = _load_proposals(args.proposals, seq)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    with Pipeline(config) as pipe:
        result = pipe.run(seq, proposals=proposals)
    save_masks(seq.name, result.masks, out, seq.frame_ids)
    write_csv(out / "timing.csv", ("frame", "stage", "milliseconds"), result.timings)
    (out / "config.txt").write_text(config.to_text())
    for k, boxes in result.object_boxes.items():
        (out / f"boxes_{k}.txt").write_text("".join(f"{b.x} {b.y} {b.w} {b.h}\n" for b in boxes))
    if result.report is not None:
        _write_metrics(out / "metrics.csv", result.report)
        print(format_summary(result.report))
    if result.tracking_lost:
        for k, t in result.lost_instances.items():
            print(f"instance {k}: tracking lost at frame {t}; previous mask repeated", file=sys.stderr)
        return EXIT_TRACKING_LOST
    return EXIT_OK


def _write_metrics(path: Path, report: MetricReport) -> None:
    """One row per frame; ``J_<k>``/``F_<k>`` columns per object."""
    objects = report.objects
    header = ["frame_index"]
    for o in objects:
        header += [f"J_{o.object_id}", f"F_{o.object_id}"]
    rows = []
    for i, frame in enumerate(objects[0].frames if objects else []):
        row = [frame]
        for o in objects:
            row += [o.j[i], o.f[i]]
        rows.append(row)
    write_csv(path, header, rows)


def _mask_dir(directory: Path) -> dict[int, Path]:
    return {numeric_key(p): p for p in sorted(directory.glob("*.png"))}


def _eval_pair(name: str, pred_dir: Path, gt_dir: Path, tolerance: int) -> list:
    gts = _mask_dir(gt_dir)
    if not gts:
        raise ValueError(f"no ground-truth masks in {gt_dir}")
    preds = _mask_dir(pred_dir)
    keys = sorted(gts)
    gt_masks = [read_mask(gts[k]) for k in keys]
    pred_masks = [read_mask(preds[k]) if k in preds else np.zeros_like(gt_masks[i]) for i, k in enumerate(keys)]
    return evaluate_sequence(name, pred_masks, gt_masks, tolerance or None)


def cmd_eval(args) -> int:
    config = _config(args)
    subdirs = sorted(p for p in args.gt.iterdir() if p.is_dir())
    pairs = [(d.name, args.pred / d.name, d) for d in subdirs] or [(args.gt.name, args.pred, args.gt)]
    report = MetricReport()
    args.out.mkdir(parents=True, exist_ok=True)
    for name, pred_dir, gt_dir in pairs:
        objects = _eval_pair(name, pred_dir, gt_dir, config.eval.tolerance)
        single = MetricReport(objects=objects)
        _write_metrics(args.out / f"{name}.csv", single)
        report.objects.extend(objects)
    summary = format_summary(report)
    (args.out / "summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_track_eval(args) -> int:
    _config(args)
    pred = read_boxes(args.pred)
    if args.gt is not None:
        gt = read_boxes(args.gt)
    else:
        gt = []
        masks = _mask_dir(args.gt_masks)
        for k in sorted(masks):
            box = mask_box(read_mask(masks[k]) == args.object)
            if box is None:
                raise ValueError(f"object {args.object} is absent from {masks[k].name}")
            gt.append(box)
    curve = iou_recall_curve(pred, gt)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, ("iou_threshold", "recall"), curve)
    for t, r in curve:
        print(f"{t:.2f}  {r:.3f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = _config(args)
    start = tuple(args.start) if args.start else (args.size[0] + 10.0, args.size[1] + 10.0)
    spec = SynthSpec(
        width=args.width,
        height=args.height,
        n_frames=args.n_frames,
        objects=(ObjectSpec(shape=args.shape, size=tuple(args.size), start=start,
                            velocity=tuple(args.velocity), rotation_deg=args.rotation),),
        name=args.name,
    )
    seq = synth_sequence(spec, config.rng_seed)
    frames_dir = args.out / "frames" / args.name
    frames_dir.mkdir(parents=True, exist_ok=True)
    for fid, frame in zip(seq.frame_ids, seq.frames):
        Image.fromarray(frame).save(frames_dir / f"{fid}.png")
    save_masks(args.name, seq.annotations, args.out / "annotations", seq.frame_ids)
    print(f"wrote {len(seq)} frames to {frames_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    seq = _load_input(args)
    args.out.mkdir(parents=True, exist_ok=True)
    first = np.asarray(seq.annotations[0])
    for k in seq.instance_ids():
        mask = first == k
        seed = [config.rng_seed, k]
        parts = generate_parts(mask, config, seed + [0])
        model = train_segmenter(seq.frame(0), mask, parts, config, seed + [1])
        path = args.out / f"model_{k}.bin"
        save_model(model, path)
        print(f"instance {k}: {len(parts)} parts, final loss {model.final_loss:.6g} -> {path}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "eval": cmd_eval,
    "track-eval": cmd_track_eval,
    "synth": cmd_synth,
    "train": cmd_train,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"partvos {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"partvos {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
