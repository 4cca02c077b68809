"""Command-line harness: data generation, training, checks, benchmarks, viz."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import Config, ValidationError, load_config
from .numerics import NumericError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynast",
        description="Dynamic sparse attention image generator: desk-scale harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a procedural toy dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--res", type=int, required=True, help="image side length")
    p.add_argument("--transform", default="identity",
                   help="identity | translate[:dx,dy] | permute[:block] | scale[:factor]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train the toy objective")
    p.add_argument("--config", help="key = value config file (defaults when omitted)")
    p.add_argument("--data", required=True, help="dataset directory from `dynast gen`")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory (log, checkpoint, figure)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true", help="suppress per-step console lines")

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--scope", choices=["op", "block", "model"], required=True)
    p.add_argument("--samples", type=int, default=6,
                   help="model scope: checked elements per parameter")
    p.add_argument("--full", action="store_true",
                   help="model scope: check every element of every parameter")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="dense vs sparse attention complexity benchmark")
    p.add_argument("--sizes", default="256,1024,4096",
                   help="comma-separated token counts (square grids)")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--report", required=True, help="CSV output path (figure saved alongside)")

    p = sub.add_parser("warp-viz", help="emit per-block warped exemplars for a sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="one sample_NNNN directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("metrics", help="L1 / PSNR / SSIM between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    return parser


def _cmd_gen(args) -> int:
    from .data import gen_toy_dataset, save_dataset

    samples = gen_toy_dataset(args.n, args.res, args.transform, args.seed)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .data import load_dataset
    from .train import resume_model, train_toy

    dataset = load_dataset(args.data)
    echo = None if args.quiet else print
    if args.resume:
        model, optimizer, cfg, start = resume_model(args.resume)
        if args.config:
            print("note: --config ignored when resuming (checkpoint carries it)")
        ckpt = train_toy(cfg, dataset, args.steps, args.out,
                         start_step=start, model=model, optimizer=optimizer, echo=echo)
    else:
        cfg = load_config(args.config) if args.config else Config()
        ckpt = train_toy(cfg, dataset, args.steps, args.out, echo=echo)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_rows, run_scope

    rows = run_scope(args.scope, samples_per_param=args.samples,
                     seed=args.seed, full=args.full)
    print(format_rows(rows))
    worst = max(r.max_rel_err for r in rows)
    failed = [r for r in rows if not r.passed]
    print(f"checked {len(rows)} paths, max rel err {worst:.3e}, "
          f"{'all PASS' if not failed else f'{len(failed)} FAIL'}")
    return EXIT_OK if not failed else EXIT_VALIDATION


def _cmd_bench(args) -> int:
    from .bench import bench_attention, render_report_figure, write_report_csv

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ValidationError(f"bad --sizes {args.sizes!r}") from None
    report = bench_attention(sizes, k=args.k, trials=args.trials)
    write_report_csv(report, args.report)
    fig_path = Path(args.report).with_suffix(".png")
    render_report_figure(report, fig_path)
    for e in sorted(report.entries, key=lambda e: (e.kind, e.n_tokens)):
        print(f"{e.kind:>6} N={e.n_tokens:<6} {e.seconds * 1e3:9.3f} ms  "
              f"macs={e.macs:<12} storage={e.candidate_storage}")
    print(f"slope dense={report.slope_dense:.3f} sparse={report.slope_sparse:.3f}")
    print(f"report: {args.report}  figure: {fig_path}")
    return EXIT_OK


def _cmd_warp_viz(args) -> int:
    from .checkpoint import load_checkpoint
    from .blocks import DynastModel
    from .data import load_sample
    from .viz import warp_viz

    cfg, params, _, _ = load_checkpoint(args.ckpt)
    model = DynastModel(cfg.model, seed=cfg.train.seed)
    model.load_state(params)
    sample = load_sample(args.sample)
    written = warp_viz(model, sample, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def _cmd_metrics(args) -> int:
    from .imageio import read_image
    from .metrics import compare

    a = read_image(args.a)
    b = read_image(args.b)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    l1_val, psnr_val, ssim_val = compare(a, b)
    print(f"L1   {l1_val:.6f}")
    print(f"PSNR {psnr_val:.4f} dB")
    print(f"SSIM {ssim_val:.6f}")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
    "warp-viz": _cmd_warp_viz,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
