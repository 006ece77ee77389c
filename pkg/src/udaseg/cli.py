"""``udaseg`` command line.

Exit status: 0 success, 2 configuration or usage error (including missing
inputs), 3 runtime abort (non-finite loss, failed arm).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ARMS, ConfigError, load_config
from .pipeline import ConfigMismatch, Pipeline, StageError, ablate
from .report import MissingRunError, write_report
from .segmentation.trainer import SegTrainingAborted
from .translation.trainer import TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("gen-data", "train-translate", "translate", "train-seg", "pseudo-label", "finetune", "evaluate",
            "ablate", "report")

log = logging.getLogger("udaseg")


def build_parser():
    p = argparse.ArgumentParser(prog="udaseg", description="Phantom-scale unsupervised domain adaptation "
                                "for abdominal organ segmentation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config (defaults to the desk preset)")
    common.add_argument("--output", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--resume", action="store_true",
                        help="reuse an output directory made with a different config, recomputing stale stages")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("train-seg", "evaluate", "ablate"):
            choices = ("no_uda", "drl") if name == "train-seg" else ARMS
            sp.add_argument("--arm", choices=choices, action="append",
                            help="arm to run (repeatable); default: every configured arm")
        if name in ("pseudo-label", "finetune"):
            sp.add_argument("--round", type=int, default=1, help="self-training round (1-based)")
        if name == "report":
            sp.add_argument("runs", nargs="*", type=Path, help="run directories (default: --output)")
            sp.add_argument("--no-figures", action="store_true")
    return p


def _arms(args, cfg, allowed=ARMS):
    arms = args.arm or [a for a in cfg.ablation.arms if a in allowed]
    return arms


def run(args):
    cfg = load_config(args.config, args.seed, args.output)
    torch.set_num_threads(1)
    if args.command == "report" and args.runs:
        missing = [r for r in args.runs if not (Path(r) / "config.yaml").exists()]
        if missing:
            raise MissingRunError(missing)
        for r in args.runs:
            rcfg = load_config(Path(r) / "config.yaml", output_override=r)
            for path in write_report(Pipeline(rcfg), figures=not args.no_figures):
                print(path)
        return EXIT_OK
    pipe = Pipeline(cfg, resume=args.resume)
    cmd = args.command
    if cmd == "gen-data":
        rec = pipe.gen_data()
        print(json.dumps(rec.info.get("counts", {})))
    elif cmd == "train-translate":
        pipe.train_translate()
    elif cmd == "translate":
        pipe.translate()
    elif cmd == "train-seg":
        for arm in _arms(args, cfg, ("no_uda", "drl")):
            pipe.train_seg(arm)
    elif cmd == "pseudo-label":
        pipe.pseudo_label(args.round)
    elif cmd == "finetune":
        pipe.finetune(args.round)
    elif cmd == "evaluate":
        for arm in _arms(args, cfg):
            rec = pipe.evaluate(arm)
            print(f"{arm}: mean DSC {100 * rec.info['overall_dsc']:.2f}  mean NSD {100 * rec.info['overall_nsd']:.2f}")
    elif cmd == "ablate":
        summary = ablate(pipe, _arms(args, cfg))
        for arm, s in summary["arms"].items():
            print(f"{arm}: mean DSC {100 * s['overall_dsc']:.2f}  mean NSD {100 * s['overall_nsd']:.2f}")
        if summary["partial"]:
            for arm, err in summary["failures"].items():
                print(f"arm {arm} failed: {err}", file=sys.stderr)
            return EXIT_RUNTIME
    elif cmd == "report":
        for path in write_report(pipe, figures=not args.no_figures):
            print(path)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, MissingRunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, SegTrainingAborted) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
