"""Command-line entry point wiring the library into reproducible runs.

Subcommands: train (toy loop to a checkpoint), edit (instruction-driven
image edit with optional masking, region-hold, and attention dumps),
sweep-lambda (frozen-trajectory threshold sweep to CSV), filter-bench
(oracle-checked smoothing kernel timings). Every run is seeded explicitly;
identical flags produce byte-identical artifacts. Exit codes: 0 success,
1 runtime failure, 2 flag error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import persistence
from .consolidation import FILTER_METHODS, INTERP_METHODS, SmoothSpec, apply_smoothing
from .model import EditModel, ModelConfig
from .reference import ref_smooth
from .region_hold import RegionHoldSpec, default_layers, replay_with_threshold
from .rng import substream
from .sampler import edit_traced
from .textvocab import encode_text
from .tokenizer import TokenGrid, decode, encode, toy_palette
from .trainer import TrainConfig, make_synthetic_task, train

DEFAULT_MODEL = dict(d_model=64, n_layers=8, n_heads=4, vocab_size=64,
                     text_vocab=18, grid_h=16, grid_w=16, max_text_len=6)


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _unit_float(value: str) -> float:
    x = float(value)
    if not (0.0 <= x <= 1.0):
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return x


def _parse_smooth(value: str) -> SmoothSpec:
    method, sep, strength = value.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("expected method:strength")
    try:
        return SmoothSpec(method, float(strength))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _parse_layer_range(value: str) -> tuple[int, int]:
    a, sep, b = value.partition("..")
    if not sep or not a.isdigit() or not b.isdigit():
        raise argparse.ArgumentTypeError("expected a..b")
    lo, hi = int(a), int(b)
    if hi < lo:
        raise argparse.ArgumentTypeError("range end before start")
    return lo, hi


def _parse_lambda_grid(value: str):
    span, sep, n = value.partition(":")
    a, sep2, b = span.partition("..")
    if not sep or not sep2:
        raise argparse.ArgumentTypeError("expected a..b:n")
    try:
        lo, hi, count = float(a), float(b), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a..b:n")
    if count < 2:
        raise argparse.ArgumentTypeError("grid needs at least 2 points")
    if not (0.0 <= lo <= hi <= 1.0):
        raise argparse.ArgumentTypeError("lambda bounds must satisfy 0 <= a <= b <= 1")
    return np.linspace(lo, hi, count)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgtedit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the default toy model")
    t.add_argument("--data-seed", type=int, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--count", type=_positive_int, default=512)
    t.add_argument("--steps", type=_positive_int, default=2000)
    t.add_argument("--batch", type=_positive_int, default=1)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--out", required=True)

    e = sub.add_parser("edit", help="edit a PPM image under an instruction")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="infile", required=True)
    e.add_argument("--text", required=True)
    e.add_argument("--gamma", type=float, default=1.0)
    e.add_argument("--steps", type=_positive_int, default=16)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--mask")
    e.add_argument("--lambda", dest="lam", type=_unit_float)
    e.add_argument("--hold-layers", type=_parse_layer_range)
    e.add_argument("--smooth", type=_parse_smooth)
    e.add_argument("--hold-every", type=_positive_int, default=1)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-attn")

    s = sub.add_parser("sweep-lambda", help="threshold sweep over one frozen run")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--steps", type=_positive_int, default=16)
    s.add_argument("--grid", type=_parse_lambda_grid, required=True)
    s.add_argument("--out", required=True)

    f = sub.add_parser("filter-bench", help="verify and time smoothing kernels")
    f.add_argument("--method", choices=FILTER_METHODS + INTERP_METHODS + ("all",),
                   default="all")
    f.add_argument("--strength", type=float, default=1.0)
    f.add_argument("--size", type=_positive_int, default=32)
    f.add_argument("--iters", type=_positive_int, default=10)
    return p


def _load_model(path: str):
    model, palette = persistence.load_checkpoint(path)
    model.eval()
    return model, palette


def _read_image_tokens(path: str, model: EditModel, palette) -> TokenGrid:
    image = persistence.read_ppm(path)
    cfg = model.config
    p = palette.patch_size
    want = (cfg.grid_h * p, cfg.grid_w * p)
    if image.shape[:2] != want:
        raise RuntimeError(
            f"input image is {image.shape[0]}x{image.shape[1]} pixels, "
            f"model expects {want[0]}x{want[1]}")
    return encode(image, palette)


def _read_pixel_mask(path: str, model: EditModel, palette) -> np.ndarray:
    """Token-level editable mask: any patch pixel at or above half intensity."""
    gray = persistence.read_pgm(path)
    cfg = model.config
    p = palette.patch_size
    want = (cfg.grid_h * p, cfg.grid_w * p)
    if gray.shape != want:
        raise RuntimeError(
            f"mask is {gray.shape[0]}x{gray.shape[1]} pixels, "
            f"expected {want[0]}x{want[1]}")
    patches = gray.reshape(cfg.grid_h, p, cfg.grid_w, p)
    return (patches >= 128.0 / 255.0).any(axis=(1, 3)).reshape(-1)


def _build_hold(args, model: EditModel, text_ids) -> RegionHoldSpec | None:
    if args.lam is None:
        if args.hold_layers is not None or args.smooth is not None:
            raise RuntimeError("--hold-layers/--smooth require --lambda")
        return None
    n_layers = model.config.n_layers
    if args.hold_layers is None:
        layers = default_layers(n_layers)
    else:
        lo, hi = args.hold_layers
        if hi >= n_layers:
            raise RuntimeError(f"hold layer {hi} out of range for {n_layers} layers")
        layers = tuple(range(lo, hi + 1))
    return RegionHoldSpec(lam=args.lam, layers=layers,
                          rows=tuple(range(len(text_ids))),
                          smooth=args.smooth, every=args.hold_every)


def cmd_train(args) -> int:
    cfg = ModelConfig(**DEFAULT_MODEL)
    samples = make_synthetic_task(args.data_seed, args.count,
                                  grid_h=cfg.grid_h, grid_w=cfg.grid_w)
    model = EditModel(cfg, seed=args.seed)
    tc = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr,
                     seed=args.seed)
    train(model, samples, tc, log=print)
    n = persistence.save_checkpoint(model, toy_palette(), args.out)
    print(f"wrote {args.out} ({n} bytes)")
    return 0


def cmd_edit(args) -> int:
    model, palette = _load_model(args.ckpt)
    original = _read_image_tokens(args.infile, model, palette)
    text_ids = encode_text(args.text)
    if len(text_ids) > model.config.max_text_len:
        raise RuntimeError("instruction longer than the model's text window")
    user_mask = None
    if args.mask is not None:
        user_mask = _read_pixel_mask(args.mask, model, palette)
    hold = _build_hold(args, model, text_ids)
    if hold is None and args.dump_attn is not None:
        # Capture maps every step without ever reverting.
        hold = RegionHoldSpec(lam=0.0, layers=default_layers(model.config.n_layers),
                              rows=tuple(range(len(text_ids))))
    print(f"edit steps={args.steps} gamma={args.gamma} seed={args.seed} "
          f"lambda={args.lam if args.lam is not None else 'off'}")
    grid, trace = edit_traced(model, original, text_ids, gamma=args.gamma,
                              steps=args.steps, seed=args.seed,
                              user_mask=user_mask, hold=hold)
    persistence.write_ppm(decode(grid, palette), args.out)
    if args.dump_attn is not None:
        out_dir = Path(args.dump_attn)
        out_dir.mkdir(parents=True, exist_ok=True)
        shape = (model.config.grid_h, model.config.grid_w)
        for i, st in enumerate(trace.steps):
            if st.scores is None:
                continue
            amap = st.scores.reshape(shape)
            persistence.write_map(amap, out_dir / f"step_{i:02d}.mgta")
            persistence.write_pgm(persistence.map_to_gray(amap),
                                  out_dir / f"step_{i:02d}.pgm")
    print(f"wrote {args.out}")
    return 0


def cmd_sweep_lambda(args) -> int:
    model, palette = _load_model(args.ckpt)
    original = _read_image_tokens(args.infile, model, palette)
    text_ids = encode_text(args.text)
    # One frozen reference run records commits and maps without reverting;
    # each threshold is then replayed over the same trajectory.
    hold = RegionHoldSpec(lam=0.0, layers=default_layers(model.config.n_layers),
                          rows=tuple(range(len(text_ids))))
    _, trace = edit_traced(model, original, text_ids, steps=args.steps,
                           seed=args.seed, hold=hold)
    src = original.flat().astype(np.int64)
    lines = ["lambda,hamming,token_l1"]
    for lam in args.grid:
        out = replay_with_threshold(trace.steps, src, float(lam))
        hamming = int((out != src).sum())
        token_l1 = int(np.abs(out - src).sum())
        lines.append(f"{lam:.6f},{hamming},{token_l1}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out} ({len(args.grid)} rows)")
    return 0


def cmd_filter_bench(args) -> int:
    methods = list(FILTER_METHODS + INTERP_METHODS) if args.method == "all" \
        else [args.method]
    amap = substream(11, 0x4246).random((args.size, args.size))  # "BF"
    for method in methods:
        strength = args.strength
        if method in INTERP_METHODS:
            k = max(1, int(strength))
            strength = float(k if k % 2 else k + 1)
        spec = SmoothSpec(method, strength)
        if method == "nearest" and spec.factor == 1:
            print(f"{method} k=1: identity-fast path")
        got = apply_smoothing(amap, spec)
        want = ref_smooth(amap, method, strength)
        if not np.allclose(got, want, atol=1e-6):
            raise RuntimeError(f"{method} disagrees with the reference oracle")
        t0 = time.perf_counter_ns()
        for _ in range(args.iters):
            apply_smoothing(amap, spec)
        per = (time.perf_counter_ns() - t0) // args.iters
        print(f"{method} strength={strength:g} size={args.size}: {per} ns/op")
    return 0


COMMANDS = {
    "train": cmd_train,
    "edit": cmd_edit,
    "sweep-lambda": cmd_sweep_lambda,
    "filter-bench": cmd_filter_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = int(os.environ.get("MGT_THREADS", "1"))
        torch.set_num_threads(1 if threads == 0 else threads)
        return COMMANDS[args.command](args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
