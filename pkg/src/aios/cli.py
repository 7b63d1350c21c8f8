"""Command-line entry point: aios datagen | train | eval | render | check."""

import argparse
import os
import sys

from .config import THRESHOLD_PRESETS, RunConfig
from .errors import AiosError


def _add_common(p):
    p.add_argument("--config", help="JSON config file (flat or nested keys)")
    p.add_argument("--seed", type=int, help="override the command's seed")
    p.add_argument("--variant", choices=["naive", "full"], help="decoder variant")
    p.add_argument("--scheme", choices=["all", "s3only", "s23"], help="parameter supervision scheme")
    p.add_argument("--threshold", help="detection score threshold or preset (agora-0.5, agora-0.3)")


def _build_config(args, seed_key):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.update({seed_key: args.seed})
    if args.variant:
        cfg.update({"model.variant": args.variant})
    if args.scheme:
        cfg.update({"loss.scheme": args.scheme})
    if args.threshold:
        cfg.update({"eval.threshold": _parse_threshold(args.threshold)})
    return cfg


def _parse_threshold(value):
    if value in THRESHOLD_PRESETS:
        return THRESHOLD_PRESETS[value]
    return float(value)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="aios")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("out_dir")
    _add_common(p)

    p = sub.add_parser("train", help="train a detector on a dataset")
    p.add_argument("dataset")
    p.add_argument("out_dir")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", default="eval_out", help="report directory")
    _add_common(p)

    p = sub.add_parser("render", help="render a prediction overlay for one scene")
    p.add_argument("checkpoint")
    p.add_argument("scene", help="scene record (.bin)")
    p.add_argument("--out", default="overlay.png")
    _add_common(p)

    p = sub.add_parser("check", help="run the self-check suite")
    _add_common(p)

    args = parser.parse_args(argv)
    if os.environ.get("AIOS_DETERMINISTIC") == "1":
        os.environ.setdefault("OMP_NUM_THREADS", "1")

    from . import harness

    try:
        if args.command == "datagen":
            cfg = _build_config(args, "data.seed")
            manifest = harness.cmd_datagen(cfg, args.out_dir)
            print(f"wrote {manifest['num_scenes']} scenes to {args.out_dir}")
        elif args.command == "train":
            cfg = _build_config(args, "train.seed")
            ckpt, log = harness.cmd_train(cfg, args.dataset, args.out_dir, resume=args.resume)
            print(f"checkpoint: {ckpt}\nloss log: {log}")
        elif args.command == "eval":
            cfg = _build_config(args, "train.seed")
            threshold = (
                _parse_threshold(args.threshold) if args.threshold else cfg["eval.threshold"]
            )
            report, acc = harness.cmd_eval(args.checkpoint, args.dataset, threshold, args.out)
            print(report.to_text(), end="")
            print(f"mean_joint2d_frac {acc.mean_joint2d_frac:.6g}")
        elif args.command == "render":
            cfg = _build_config(args, "train.seed")
            threshold = (
                _parse_threshold(args.threshold) if args.threshold else cfg["eval.threshold"]
            )
            out = harness.cmd_render(args.checkpoint, args.scene, args.out, threshold)
            print(f"wrote {out}")
        elif args.command == "check":
            ok, _ = harness.cmd_check()
            return 0 if ok else 1
    except AiosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
