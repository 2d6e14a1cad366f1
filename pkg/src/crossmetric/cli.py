"""Command line entry point: ``crossmetric {synth,train,eval,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .config import ConfigError, PipelineConfig
from .pipeline import StageError, evaluate, read_summary, synth, train
from .report import build_report

log = logging.getLogger("crossmetric")


def _apply_override(cfg: PipelineConfig, assignment: str) -> PipelineConfig:
    """``dotted.key=json-value``, validated like the config file."""
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    data = config_mod.to_dict(cfg)
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown key {key!r}")
    node[parts[-1]] = value
    return config_mod.validate(config_mod.from_dict(PipelineConfig, data))


def _load_config(args, default: Path | None = None) -> PipelineConfig:
    if args.config:
        cfg = config_mod.load(args.config)
    elif default is not None and default.exists():
        cfg = config_mod.load(default)
    else:
        cfg = PipelineConfig()
    for assignment in args.set or ():
        cfg = _apply_override(cfg, assignment)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.dataset.synthetic.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return config_mod.validate(cfg)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    path = synth(cfg, cfg.out_dir)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = train(cfg)
    print(f"trained run in {out}")
    return 0


def cmd_eval(args) -> int:
    if not args.out:
        raise ConfigError("eval needs --out <run dir>")
    run_dir = Path(args.out)
    cfg = _load_config(args, default=run_dir / "config.json")
    evaluate(cfg, run_dir)
    summary = read_summary(run_dir)
    for scorer, by_task in summary.items():
        for task, value in by_task.items():
            print(f"{scorer:<8} {task:<12} {value:.4f}")
    return 0


def cmd_report(args) -> int:
    if not args.out:
        raise ConfigError("report needs --out <run dir>")
    path = build_report(args.out, args.report_dir)
    print(path.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmetric", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic cross-media dataset",
        "train": "run standardize -> pretrain -> finetune -> metric training",
        "eval": "score the test split of a trained run",
        "report": "comparison tables and figures for evaluated runs",
    }
    for name, fn in (("synth", cmd_synth), ("train", cmd_train),
                     ("eval", cmd_eval), ("report", cmd_report)):
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output (or run) directory")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. finetune.learning_rate=0.05")
        if name == "report":
            p.add_argument("--report-dir", help="write the report here instead of --out")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
