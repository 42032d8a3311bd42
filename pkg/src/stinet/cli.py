"""Command line entry point: train, infer, eval, ablate, plot, train-flow."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch


def _cmd_train(args):
    from .config import load_config, save_config
    from .train import train

    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    result = train(cfg, out_dir=out, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")


def _cmd_infer(args):
    from .data import load_clip, save_clip
    from .train import infer, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    clip = load_clip(args.inp)
    out = infer(ckpt, clip, n_interp=args.n_interp)
    save_clip(out, args.out)
    print(f"wrote {out.T} frames of {out.H}x{out.W} to {args.out}")


def _cmd_eval(args):
    from .data import read_manifest
    from .train import evaluate, load_checkpoint, load_clips

    ckpt = load_checkpoint(args.ckpt)
    clips = read_manifest(args.data) if args.data else load_clips(ckpt.config, heldout=True)
    report = evaluate(ckpt, clips, channel="rgb" if args.rgb else "y")
    report.curves = ckpt.curves
    if args.report:
        report.save(args.report)
    base = report.baseline["mean_psnr"] if report.baseline else float("nan")
    print(f"PSNR {report.mean_psnr:.3f} dB  SSIM {report.mean_ssim:.4f}  (bicubic+repeat {base:.3f} dB)")


def _cmd_ablate(args):
    from .ablation import load_matrix, run_ablation_suite

    table = run_ablation_suite(load_matrix(args.matrix), args.out, resume=not args.fresh)
    for name, row in table["variants"].items():
        if row["status"] == "ok":
            print(f"{name:20s} {row['mean_psnr']:.3f} dB  {row['mean_ssim']:.4f}")
        else:
            print(f"{name:20s} FAILED {row['error']}")


def _cmd_plot(args):
    from .ablation import plot_report

    print(plot_report(args.report, args.out))


def _cmd_train_flow(args):
    from .flow import _DEFAULT_RECIPE, train_flow_estimator

    net = train_flow_estimator(**{**_DEFAULT_RECIPE, "iters": args.iters, "seed": args.seed}, progress=True)
    torch.save(net.state_dict(), args.out)
    print(f"saved flow estimator to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stinet", description="Space-time video super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="YAML/JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--out", default="runs/train")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="upscale and interpolate a clip directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="directory of LR frames")
    p.add_argument("--n-interp", type=int, default=1, choices=(1, 3, 5))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on HR clips")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="clip directory or manifest; held-out synthetic if omitted")
    p.add_argument("--report", default=None, help="write JSON report here")
    p.add_argument("--rgb", action="store_true", help="score RGB instead of luma")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--fresh", action="store_true", help="retrain variants that already have reports")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="plot an ablation table or report curves")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("train-flow", help="train the synthetic-data flow estimator")
    p.add_argument("--iters", type=int, default=6000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="flow.pt")
    p.set_defaults(func=_cmd_train_flow)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
