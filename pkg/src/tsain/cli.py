"""Command-line entry point: ``tsain prepare|train|eval|infer|dump-offsets``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfigError, load_run_config
from .data import (DataError, DefectFilter, load_triplet_dir, prepare_dataset, read_gray_png,
                   to_tensor, write_gray_png)
from .deformconv import sampling_positions
from .model import count_parameters, tsain_forward
from .numerics import ConfigError, ShapeError, no_grad
from .training import evaluate, predict, summarize, train

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

BLOCKS = ("rsab1", "rsab2", "rsab3", "drb1", "drb2", "drb3")


class UsageError(Exception):
    pass


def _pos(text: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"position must look like 'y,x', got {text!r}") from None
    return y, x


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsain", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="align, tile and filter a section series")
    p.add_argument("--root", required=True, help="directory of section PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=512)
    p.add_argument("--stride", type=int, default=512)
    p.add_argument("--max-shift", type=int, default=8)
    p.add_argument("--hist-spec", choices=("on", "off"), default="on")
    p.add_argument("--step", type=int, default=3, help="section step between triples")
    p.add_argument("--min-ncc", type=float, default=DefectFilter.min_ncc)
    p.add_argument("--max-blur-ratio", type=float, default=DefectFilter.max_blur_ratio)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")

    p = sub.add_parser("eval", help="PSNR/SSIM/IE over a triplet directory")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path; an aligned table goes next to it (.txt)")
    p.add_argument("--predict-copy-first-frame", action="store_true",
                   help="baseline that predicts frame 0 (no checkpoint needed)")

    p = sub.add_parser("infer", help="interpolate one middle frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--im0", required=True)
    p.add_argument("--im2", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dump-offsets", help="learned sampling points of one block at one position")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--im0", required=True)
    p.add_argument("--im2", required=True)
    p.add_argument("--block", required=True)
    p.add_argument("--pos", required=True, type=_pos)
    p.add_argument("--side", type=int, choices=(0, 2), default=0,
                   help="which input-frame branch of a DRB to dump")
    p.add_argument("--out", required=True)
    return ap


def cmd_prepare(args) -> int:
    report = prepare_dataset(args.root, args.out, tile=args.tile, stride=args.stride,
                             max_shift=args.max_shift, hist_spec=args.hist_spec == "on",
                             step=args.step,
                             defect_filter=DefectFilter(args.min_ncc, args.max_blur_ratio))
    rej = " ".join(f"{k}={v}" for k, v in report.rejected.items())
    print(f"triples={report.triples} tiles={report.tiles} kept={report.kept} rejected: {rej}")
    if report.kept == 0:
        print("error: no samples survived preparation", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    params = train(cfg, resume=args.resume)
    print(f"trained to epoch {params.epoch}; checkpoint {cfg.io.checkpoint}")
    return EXIT_OK


def _table(rows, params_count, runtime) -> str:
    lines = [f"{'id':<28} {'PSNR':>9} {'SSIM':>8} {'IE':>9}"]
    for r in rows:
        lines.append(f"{r.id:<28} {r.psnr:>9.4f} {r.ssim:>8.4f} {r.ie:>9.4f}")
    mp, ms, mi = summarize(rows)
    lines.append(f"{'mean':<28} {mp:>9.4f} {ms:>8.4f} {mi:>9.4f}")
    lines.append(f"params: {params_count}  runtime: {runtime:.4f} s/frame")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    if not args.predict_copy_first_frame and not args.checkpoint:
        raise UsageError("--checkpoint is required unless --predict-copy-first-frame is given")
    params = None if args.predict_copy_first_frame else load_checkpoint(args.checkpoint)
    triplets = load_triplet_dir(args.data)
    rows, runtime = evaluate(params, triplets, copy_first=args.predict_copy_first_frame)
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr", "ssim", "ie"])
        for r in rows:
            w.writerow([r.id, repr(float(r.psnr)), repr(float(r.ssim)), repr(float(r.ie))])
    table = _table(rows, count_parameters(params) if params else 0, runtime)
    out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _load_pair(args):
    i0 = read_gray_png(args.im0)
    i2 = read_gray_png(args.im2)
    if i0.shape != i2.shape:
        raise UsageError(f"input sizes differ: {i0.shape} vs {i2.shape}")
    return i0, i2


def cmd_infer(args) -> int:
    params = load_checkpoint(args.checkpoint)
    i0, i2 = _load_pair(args)
    write_gray_png(args.out, predict(params, i0, i2))
    return EXIT_OK


def dump_offsets(params, i0: np.ndarray, i2: np.ndarray, block: str, pos: tuple[int, int],
                 side: int = 0) -> list[str]:
    """Lines ``k y x m`` of absolute sampling points for one block and position."""
    if block not in BLOCKS:
        raise UsageError(f"unknown block {block!r}; choose from {', '.join(BLOCKS)}")
    key = block if block.startswith("rsab") else f"{block}.{side}"
    h, w = i0.shape
    y, x = pos
    if not (0 <= y < h and 0 <= x < w):
        raise UsageError(f"position {y},{x} outside the {h}x{w} frame")
    trace: dict = {}
    with no_grad():
        tsain_forward(to_tensor([i0]), to_tensor([i2]), params, trace=trace)
    if key not in trace:
        raise UsageError(f"block {block!r} is not active in this model")
    _, kernel, off, mask = trace[key]
    kh, kw = kernel.weight.shape[2:]
    ys, xs = sampling_positions(off.data, kh, kw)
    K = kh * kw
    lines = [f"# block={block} pos={y},{x} K={K}"]
    for k in range(K):
        vals = (float(ys[0, k, y, x]), float(xs[0, k, y, x]), float(mask.data[0, k, y, x]))
        lines.append(f"{k} " + " ".join(repr(v) for v in vals))
    return lines


def cmd_dump_offsets(args) -> int:
    params = load_checkpoint(args.checkpoint)
    i0, i2 = _load_pair(args)
    lines = dump_offsets(params, i0, i2, args.block, args.pos, args.side)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "dump-offsets": cmd_dump_offsets}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RunConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, DataError, CheckpointError, ConfigError, ShapeError,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - stable exit code for anything unexpected
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
