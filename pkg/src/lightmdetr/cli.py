"""Command-line entry point: ``lightmdetr {synth,train,eval,count-params,gradcheck}``.

Exit status is 0 only when the command fully succeeds: 1 for a failed check
(gradient check, freeze audit, non-finite loss), 2 for bad arguments or
configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, paper_scale_config, tiny_config
from .data import ConfigError, InputError, SplitSpec, generate_split, write_scenes
from .params import CheckpointError

log = logging.getLogger("lightmdetr")


def _load_config(args, default=None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else (default or RunConfig())
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    # for synth, --seed selects the data seed
    spec = cfg.data if args.seed is None else SplitSpec.from_dict({**cfg.data.to_dict(), "seed": args.seed})
    out = _out_dir(args)
    for split in ("train", "val"):
        write_scenes(out / f"{split}.jsonl", generate_split(spec, split), spec)
    spec.vocabulary().save(out / "vocab.txt")
    print(f"wrote {spec.n_train} train and {spec.n_val} val scenes to {out}")
    return 0


def plot_loss(curve: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([row["total"] for row in curve], label="total")
    for key in ("l1", "giou", "soft_token", "contrastive"):
        ax.plot([row[key] for row in curve], label=key, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_train(args) -> int:
    from .train import FreezeViolation, NonFiniteLossError, train

    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.with_(steps=args.steps, epochs=None)
    out = _out_dir(args)
    try:
        result = train(cfg, out, resume=args.resume)
    except NonFiniteLossError as exc:
        print(f"error: {exc}; batch dumped to {exc.dump_path}", file=sys.stderr)
        return 1
    except FreezeViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    curve = result.curve
    if curve:
        first, last = curve[0]["total"], curve[-1]["total"]
        print(f"steps\t{len(curve)}\nfirst_total\t{first:.6f}\nlast_total\t{last:.6f}")
    print(f"freeze_audits\t{result.audits}\ncheckpoint\t{result.checkpoint}")
    if args.plot and curve:
        plot_loss(curve, out / "loss.png")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    if not args.checkpoint:
        print("error: eval needs --checkpoint", file=sys.stderr)
        return 2
    cfg = RunConfig.load(args.config) if args.config else None
    dump = None
    if args.out_dir:
        dump = _out_dir(args) / f"predictions_{args.split}.jsonl"
    report = evaluate(args.checkpoint, args.split, cfg, confidence_threshold=args.confidence,
                      dump_path=dump, workers=args.workers)
    print(report.table())
    if args.out_dir:
        (Path(args.out_dir) / f"metrics_{args.split}.json").write_text(json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_count_params(args) -> int:
    from .accounting import backbone_fraction, count_params

    if args.paper_scale:
        cfg = paper_scale_config(args.variant or "light")
    else:
        cfg = _load_config(args)
        if args.variant:
            cfg = cfg.with_(variant=args.variant)
    report = count_params(cfg)
    print(report.table() if args.verbose else "\n".join(report.table().splitlines()[-4:]))
    if cfg.variant != "full_train":
        baseline = count_params(cfg.with_(variant="full_train"))
        print(f"baseline_trainable_backbone\t\t{baseline.trainable_backbone}")
        print(f"trainable_backbone_fraction\t\t{backbone_fraction(report, baseline):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    cfg = _load_config(args, default=tiny_config())
    report = gradcheck(cfg, seed=cfg.seed)
    print(report.table())
    print(f"worst\t{report.worst:.3e}\ttolerance\t{report.tolerance:.0e}")
    if not report.passed:
        print("failed tensors: " + ", ".join(report.failures), file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightmdetr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out-dir", required=out_required, help="output directory")
        p.add_argument("--checkpoint", help="checkpoint file")

    p = sub.add_parser("synth", help="write the synthetic train/val splits")
    common(p, out_required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write checkpoint + loss log")
    common(p, out_required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT_DIR/checkpoint.bin")
    p.add_argument("--steps", type=int, help="override the number of steps")
    p.add_argument("--plot", action="store_true", help="also write loss.png (needs matplotlib)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="grounding metrics of a checkpoint")
    common(p)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--confidence", type=float, default=None,
                   help="drop boxes whose 1 - P(no-object) is below this (e.g. 0.7)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="parameter counts by group")
    common(p)
    p.add_argument("--variant", choices=("light", "plus", "full_train"))
    p.add_argument("--paper-scale", action="store_true", help="use paper-scale widths")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of all trainable tensors")
    common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
