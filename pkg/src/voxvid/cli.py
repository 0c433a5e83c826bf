"""Command-line entry point: train, sample, bench, eval-ssim."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path


def _pick_blas_kernel() -> None:
    # Some VMs mask CPUID so OpenBLAS auto-detection falls back to a slow
    # generic kernel even when AVX-512 is available. Pin the kernel before
    # numpy (and therefore OpenBLAS) initializes; respect an explicit choice.
    if "OPENBLAS_CORETYPE" in os.environ:
        return
    try:
        with open("/proc/cpuinfo") as fh:
            flags = fh.read()
    except OSError:
        return
    needed = ("avx512f", "avx512dq", "avx512bw", "avx512vl")
    if all(f in flags for f in needed):
        os.environ["OPENBLAS_CORETYPE"] = "SKYLAKEX"


_pick_blas_kernel()

import numpy as np

from . import codec as codec_mod
from .metrics import ssim_video
from .pipeline import (
    InternalError,
    UserError,
    format_benchmark_table,
    load_config,
    run_benchmark,
    run_sample,
    run_train,
)
from .tensor import NonFiniteError, ShapeError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxvid",
        description="Latent diffusion-transformer toolkit for audio-driven video",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a denoiser from a JSON config")
    p_train.add_argument("--config", required=True, help="JSON run config")
    p_train.add_argument("--resume", default=None, metavar="CKPT",
                         help="checkpoint to resume from")

    p_sample = sub.add_parser("sample", help="generate clips from a checkpoint")
    p_sample.add_argument("--config", required=True, help="JSON run config")
    p_sample.add_argument("--ckpt", required=True, help="checkpoint file")
    p_sample.add_argument("--ref", required=True, help="reference frame (.vtf or .png)")
    p_sample.add_argument("--audio", default=None, help="driving audio (.wav or raw f32)")
    p_sample.add_argument("--seed", type=int, default=None, help="sampling seed")
    p_sample.add_argument("--zero-audio", action="store_true",
                          help="sample unconditionally on audio (zero tokens)")
    p_sample.add_argument("--clips", type=int, default=1,
                          help="number of chained clips to generate")

    p_bench = sub.add_parser("bench", help="joint vs factorized attention cost")
    p_bench.add_argument("--f-list", required=True,
                         help="comma-separated frame counts, e.g. 8,16")
    p_bench.add_argument("--p-list", required=True,
                         help="comma-separated tokens-per-frame counts, e.g. 64,256")
    p_bench.add_argument("--dim", type=int, default=64, help="token width")
    p_bench.add_argument("--reps", type=int, default=5, help="timing repetitions")
    p_bench.add_argument("--out", default=None, help="directory for bench.csv/bench.txt")

    p_ssim = sub.add_parser("eval-ssim", help="mean SSIM between two videos")
    p_ssim.add_argument("a", help="first video (.vtf or directory of .png frames)")
    p_ssim.add_argument("b", help="second video (.vtf or directory of .png frames)")
    return parser


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UserError(f"{flag} expects comma-separated integers: {text!r}") from e
    if not values or any(v <= 0 for v in values):
        raise UserError(f"{flag} expects positive integers: {text!r}")
    return values


def _load_video(path: str) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        frames = sorted(p.glob("*.png"))
        if not frames:
            raise UserError(f"no .png frames in {p}")
        return codec_mod.import_png_frames(frames)
    if not p.exists():
        raise UserError(f"video not found: {p}")
    if p.suffix == ".vtf":
        return codec_mod.load_tensor(p)
    raise UserError(f"unsupported video format: {p}")


def _dispatch(args) -> int:
    if args.command == "train":
        summary = run_train(load_config(args.config), resume=args.resume)
        print(
            f"trained {summary['step']} steps: "
            f"loss_simple={summary['loss_simple']:.6f} "
            f"loss_vlb={summary['loss_vlb']:.6f}"
        )
        print(f"checkpoint: {summary['checkpoint']}")
        print(f"ema checkpoint: {summary['ema_checkpoint']}")
        return 0
    if args.command == "sample":
        result = run_sample(
            load_config(args.config),
            ckpt_path=args.ckpt,
            ref_path=args.ref,
            audio_path=args.audio,
            seed=args.seed,
            zero_audio=args.zero_audio,
            clips=args.clips,
        )
        print(f"wrote {result['frames']} frames: {result['latents']}")
        if "pixels" in result:
            print(f"decoded pixels: {result['pixels']}")
        return 0
    if args.command == "bench":
        rows = run_benchmark(
            _parse_int_list(args.f_list, "--f-list"),
            _parse_int_list(args.p_list, "--p-list"),
            dim=args.dim,
            reps=args.reps,
            out_dir=args.out,
        )
        print(format_benchmark_table(rows), end="")
        return 0
    if args.command == "eval-ssim":
        a = _load_video(args.a)
        b = _load_video(args.b)
        if a.shape != b.shape:
            raise UserError(f"video shapes differ: {a.shape} vs {b.shape}")
        print(f"ssim: {ssim_video(a, b):.6f}")
        return 0
    raise InternalError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (InternalError, NonFiniteError, ShapeError, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
