"""Command-line entry point.

Subcommands: simulate, train, sr, eval, render, gradcheck, selftest.
Exit codes: 0 success, 1 validation/check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from .events import EventStream, frame_sequence, parse_event_file, resample, write_event_file
from .evaluation import (
    evaluate,
    render_frame,
    save_loss_figure,
    save_rmse_figure,
    save_sequence_figure,
)
from .model import ModelConfig, forward_sequence, load_checkpoint
from .simulate import make_pair, parse_scene_config
from .training import TrainConfig, make_samples, train, write_loss_trace


def _threads(args) -> int:
    env = os.environ.get("ESR_FORGE_THREADS")
    if env is not None:
        return max(1, int(env))
    return max(1, getattr(args, "threads", 1))


def _read_pair_dir(path: Path) -> list[tuple[str, EventStream, EventStream]]:
    pairs = []
    for lr_path in sorted(path.glob("*.lr.txt")):
        hr_path = lr_path.with_name(lr_path.name.replace(".lr.txt", ".hr.txt"))
        if not hr_path.exists():
            raise ValueError(f"missing HR file for {lr_path.name}")
        pairs.append((
            lr_path.name[: -len(".lr.txt")],
            parse_event_file(lr_path.read_text()),
            parse_event_file(hr_path.read_text()),
        ))
    if not pairs:
        raise ValueError(f"no *.lr.txt/*.hr.txt pairs in {path}")
    return pairs


def _build_dataset(data_dir: str, window_us: int, window: int):
    samples = []
    for _, lr, hr in _read_pair_dir(Path(data_dir)):
        samples.extend(make_samples(lr, hr, window_us, window))
    if not samples:
        raise ValueError("dataset produced no training windows")
    return samples


def cmd_simulate(args) -> int:
    spec, params, cfg_scale = parse_scene_config(Path(args.scene).read_text())
    scale = args.scale if args.scale else cfg_scale
    lr, hr = make_pair(spec, scale, params)
    Path(args.out_lr).write_text(write_event_file(lr))
    Path(args.out_hr).write_text(write_event_file(hr))
    print(f"wrote {args.out_lr} ({lr.width}x{lr.height}, {len(lr)} events) and "
          f"{args.out_hr} ({hr.width}x{hr.height}, {len(hr)} events)")
    return 0


def cmd_train(args) -> int:
    model_cfg = ModelConfig(
        channels=args.c, layers=args.n, slots=args.m, scale=args.scale,
        window=args.t, variant=args.variant, carry_state=not args.no_carry,
        scale_mode=args.scale_mode, seed=args.seed,
    )
    train_cfg = TrainConfig(
        batch_size=args.batch, lr0=args.lr0, decay=args.decay,
        decay_every=args.decay_every, max_iters=args.iters, window=args.t,
        augment=not args.no_augment, seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    dataset = _build_dataset(args.data, args.window_us, args.t)
    print(f"training on {len(dataset)} windows "
          f"({model_cfg.variant}, C={model_cfg.channels}, N={model_cfg.layers}, "
          f"M={model_cfg.slots}, S={model_cfg.scale}, T={model_cfg.window})")
    t0 = time.perf_counter()
    _, trace = train(dataset, model_cfg, train_cfg, ckpt_path=args.ckpt)
    loss_csv = args.ckpt + ".loss.csv"
    write_loss_trace(trace, loss_csv)
    if trace:
        save_loss_figure(trace, args.ckpt + ".loss.png")
        print(f"final loss {trace[-1][2]:.6g} after {len(trace)} iterations "
              f"({time.perf_counter() - t0:.1f} s)")
    print(f"checkpoint: {args.ckpt}; loss trace: {loss_csv}")
    return 0


def cmd_sr(args) -> int:
    state = load_checkpoint(args.ckpt)
    stream = parse_event_file(Path(args.infile).read_text())
    s = state.config.scale
    if len(stream) == 0:
        out = EventStream(stream.width * s, stream.height * s)
        Path(args.out).write_text(write_event_file(out))
        print(f"empty input; wrote header-only {args.out}")
        return 0
    t0 = int(stream.t[0])
    span = int(stream.t[-1]) - t0 + 1
    n_frames = max(1, math.ceil(span / args.window_us))
    frames = frame_sequence(stream, args.window_us, n_frames)
    window = args.t if args.t else state.config.window
    sr_frames = []
    for i in range(0, n_frames, window):
        sr_frames.extend(forward_sequence(state, frames[i:i + window]))
    pieces = [resample(f) for f in sr_frames]
    xs = np.concatenate([p.x for p in pieces])
    ys = np.concatenate([p.y for p in pieces])
    ts = np.concatenate([p.t for p in pieces])
    ps = np.concatenate([p.p for p in pieces])
    out = EventStream(stream.width * s, stream.height * s, xs, ys, ts, ps)
    Path(args.out).write_text(write_event_file(out))
    print(f"super-resolved {len(stream)} events -> {len(out)} events at "
          f"{out.width}x{out.height}; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    window = args.t if args.t else state.config.window
    dataset = _build_dataset(args.data, args.window_us, window)
    report = evaluate(state, dataset, threads=_threads(args))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report.to_csv())
    save_rmse_figure(report, out_dir / "rmse.png")
    save_sequence_figure(state, dataset[0], out_dir / "sequence.png")
    print(report.format_table())
    print(f"report written to {out_dir}/report.csv (+ rmse.png, sequence.png)")
    return 0


def cmd_render(args) -> int:
    stream = parse_event_file(Path(args.infile).read_text())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.count:
        n_frames = args.count
    elif len(stream):
        n_frames = max(1, math.ceil((int(stream.t[-1]) - int(stream.t[0]) + 1) / args.window_us))
    else:
        n_frames = 1
    for i, frame in enumerate(frame_sequence(stream, args.window_us, n_frames)):
        render_frame(frame, out_dir / f"frame_{i:04d}.ppm")
    print(f"rendered {n_frames} frames to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = checks.gradient_suite(range(args.seeds))
    failed = _print_results(results)
    worst = max(float(r.detail.split()[-1]) for r in results)
    print(f"max rel err {worst:.3g}; {time.perf_counter() - t0:.1f} s")
    return 1 if failed else 0


def cmd_selftest(args) -> int:
    results = checks.invariant_suite()
    failed = _print_results(results)
    return 1 if failed else 0


def _print_results(results) -> list:
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail}")
    if failed:
        print(f"FAILED: {failed[0].name}", file=sys.stderr)
    return failed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esr-forge",
                                     description="event-stream super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate an aligned LR/HR event-stream pair")
    p.add_argument("--scene", required=True, help="key=value scene config file")
    p.add_argument("--scale", type=int, default=0, help="override the config's scale")
    p.add_argument("--out-lr", required=True)
    p.add_argument("--out-hr", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; scenes are analytic")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train on *.lr.txt/*.hr.txt pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--variant", choices=("mixed", "plain", "full"), default="full")
    p.add_argument("--c", type=int, default=128, help="feature channels")
    p.add_argument("--n", type=int, default=5, help="layers of basic blocks")
    p.add_argument("--m", type=int, default=128, help="attention slots")
    p.add_argument("--t", type=int, default=9, help="training window length")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--window-us", type=int, default=10000)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--lr0", type=float, default=0.001)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--decay-every", type=int, default=4000)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-carry", action="store_true", help="disable the cross-step recurrence")
    p.add_argument("--scale-mode", choices=("rsqrt_hw", "sqrt_c"), default="rsqrt_hw")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sr", help="super-resolve an event stream with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--window-us", type=int, default=10000)
    p.add_argument("--t", type=int, default=0, help="window length (default: checkpoint's)")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_sr)

    p = sub.add_parser("eval", help="RMSE report vs the bicubic baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window-us", type=int, default=10000)
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--out-dir", default="eval_out")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="render count images to PPM files")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--window-us", type=int, default=10000)
    p.add_argument("--count", type=int, default=0, help="frame count (default: cover the stream)")
    p.add_argument("--out-dir", default="render_out")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("gradcheck", help="64-bit central-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run all module invariant suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
