"""Command-line interface: encode, decode, train, evaluate and curves.

Exit codes: 0 success, 2 bad arguments, 3 I/O or missing external tool,
4 verification failure (corrupt container, model mismatch, decoder drift).
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

from .codec import ContainerError, decode_sequence, encode_sequence, read_container
from .evaluate import CSV_FIELDS, VerificationError, evaluate, read_rd_csv, write_rd_csv
from .frames import (FrameError, load_sequence, read_manifest, sample_clips, septuplet_frames,
                     write_sequence)
from .iframe import IFrameCodecUnavailable, make_iframe_codec
from .model import STAGES, load_checkpoint, normalize_metric, save_checkpoint
from .training import TrainingSchedule, train_progressive

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("lvcodec")


class UsageError(ValueError):
    pass


def _load_frames(directory, gop=None):
    manifest = read_manifest(directory, gop=gop)
    return manifest, load_sequence(manifest)


def cmd_encode(args) -> int:
    model = load_checkpoint(args.model)
    manifest, frames = _load_frames(args.input, args.gop)
    codec = make_iframe_codec(args.iframe, model.lam)
    enc = encode_sequence(frames, model, codec, gop=manifest.gop,
                          policy="pad" if args.pad else "reject")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(enc.data)
    log.info("wrote %d frames, %d bytes, %.4f bpp", len(frames), len(enc.data),
             enc.bits / (len(frames) * manifest.width * manifest.height))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = load_checkpoint(args.model)
    data = Path(args.input).read_bytes()
    header, _ = read_container(data)
    codec = make_iframe_codec(args.iframe, model.lam) if args.iframe else None
    frames = decode_sequence(data, model, codec)
    write_sequence(frames, args.out, gop=header.gop)
    log.info("decoded %d frames into %s", len(frames), args.out)
    return EXIT_OK


def _training_frames(directory: Path):
    """A numbered sequence folder, or a folder of septuplet folders (im1.png ... im7.png)."""
    try:
        return [_load_frames(directory)[1]]
    except FileNotFoundError:
        if not directory.is_dir():
            raise
    seqs = [septuplet_frames(d) for d in sorted(directory.iterdir())
            if d.is_dir() and (d / "im1.png").is_file()]
    if not seqs:
        raise FileNotFoundError(f"no training frames found under {directory}")
    return seqs


def _clip_stream(sequences, crop: int, seed: int):
    streams = [sample_clips(frames, clip_len=2, crop=crop, seed=seed + i)
               for i, frames in enumerate(sequences)]
    while True:
        for s in streams:
            yield next(s)


def cmd_train(args) -> int:
    metric = normalize_metric(args.metric)
    init = load_checkpoint(args.init) if args.init else None
    if metric == "ms-ssim" and init is None:
        raise UsageError("--metric msssim fine-tunes an MSE model; pass --init")
    sequences = _training_frames(Path(args.data))
    crop = min(args.crop, *(min(s[0].shape[-2:]) for s in sequences))
    stages = STAGES if metric == "mse" else ("ALL",)
    max_steps = {s: args.max_steps for s in STAGES}
    schedule = TrainingSchedule(window=args.window, max_steps=max_steps, stages=stages,
                                prior_lr_scale=args.prior_lr_scale)
    result = train_progressive(_clip_stream(sequences, crop, args.seed), args.lam, metric,
                               schedule=schedule, seed=args.seed, init=init,
                               batch_size=args.batch_size,
                               checkpoint_path=Path(args.out).with_suffix(".diverged.pt"))
    save_checkpoint(result.model, args.out, {"steps": len(result.log)})
    if args.log:
        result.write_csv(args.log)
    log.info("trained %d steps, final loss %.5f", len(result.log), result.log[-1]["loss"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.model)
    manifest, frames = _load_frames(args.input, args.gop)
    codec = make_iframe_codec(args.iframe, model.lam)
    container = Path(args.container).read_bytes() if args.container else None
    name = args.sequence or Path(args.input).name
    point = evaluate(frames, model, codec, gop=manifest.gop, sequence=name,
                     policy="pad" if args.pad else "reject", container=container)
    if args.csv:
        write_rd_csv([point], args.csv)
    else:
        print(",".join(CSV_FIELDS))
        print(",".join(str(v) for v in point.row().values()))
    return EXIT_OK


def cmd_curves(args) -> int:
    points = [p for path in args.csv for p in read_rd_csv(path)]
    if not points:
        raise UsageError("no RD points in the given CSV files")
    points.sort(key=lambda p: (p.sequence, p.metric, p.bpp))
    if args.table:
        write_rd_csv(points, args.table)
    print(f"{'sequence':<16} {'metric':<8} {'lambda':>8} {'bpp':>10} {'psnr_db':>9} {'msssim':>8}")
    for p in points:
        print(f"{p.sequence:<16} {p.metric:<8} {p.lam:>8g} {p.bpp:>10.5f} {p.psnr_db:>9.3f} "
              f"{p.msssim:>8.5f}")
    if args.plot:
        _plot(points, Path(args.plot))
    return EXIT_OK


def _plot(points, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    keys = sorted({(p.sequence, p.metric) for p in points})
    for seq, metric in keys:
        sel = [p for p in points if (p.sequence, p.metric) == (seq, metric)]
        label = f"{seq} ({metric})"
        ax_p.plot([p.bpp for p in sel], [p.psnr_db for p in sel], "o-", label=label)
        ax_s.plot([p.bpp for p in sel], [p.msssim for p in sel], "o-", label=label)
    ax_p.set(xlabel="bpp", ylabel="PSNR (dB)")
    ax_s.set(xlabel="bpp", ylabel="MS-SSIM")
    ax_p.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvcodec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a frame folder into a container")
    p.add_argument("--input", required=True, help="folder of numbered PNG frames")
    p.add_argument("--model", required=True)
    p.add_argument("--gop", type=int, default=None, help="intra period (default: manifest or 10)")
    p.add_argument("--iframe", choices=("bpg", "lossless"), default="lossless")
    p.add_argument("--pad", action="store_true", help="edge-pad frames to multiples of 16")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a container into PNG frames")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--iframe", choices=("bpg", "lossless"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train (or fine-tune) a model")
    p.add_argument("--data", required=True,
                   help="a numbered frame folder or a folder of septuplet folders")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--metric", choices=("psnr", "msssim"), default="psnr")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="MSE checkpoint to fine-tune from (required for msssim)")
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-steps", type=int, default=200_000, help="per stage and LR level")
    p.add_argument("--window", type=int, default=500, help="convergence window in steps")
    p.add_argument("--prior-lr-scale", type=float, default=1.0)
    p.add_argument("--log", help="write the per-step loss log as CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="encode/decode/verify and write an RD point CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--gop", type=int, default=None)
    p.add_argument("--iframe", choices=("bpg", "lossless"), default="lossless")
    p.add_argument("--pad", action="store_true")
    p.add_argument("--container", help="evaluate this container instead of a fresh encoding")
    p.add_argument("--sequence", help="sequence id for the CSV (default: folder name)")
    p.add_argument("--csv", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curves", help="aggregate RD CSVs into a table and plot")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--table", help="write the merged, bpp-sorted table as CSV")
    p.add_argument("--plot", help="write an RD plot image (e.g. rd.png)")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (VerificationError, ContainerError) as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (FileNotFoundError, IsADirectoryError, PermissionError, FrameError,
            IFrameCodecUnavailable, subprocess.CalledProcessError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
