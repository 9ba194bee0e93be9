"""Command-line entry point: ``tavp <command> --config FILE --seed N --out DIR``.

Commands chain through checkpoints in ``--out``: ``stage2`` reads
``stage1.ckpt``, ``stage3`` reads ``stage2.ckpt`` and ``eval`` reads the most
advanced checkpoint present unless ``--checkpoint`` names one.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, parse_config
from .errors import ConfigError, TavpError
from .metrics import MetricsWriter
from . import pipeline

COMMANDS = ("stage1", "stage2", "stage3", "eval", "ablate", "run")
_U64_MAX = 2**64 - 1


def _u64(text: str) -> int:
    try:
        value = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= _U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tavp", description="Task-aware view planning: train, evaluate, ablate.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="key = value config file (defaults if omitted)")
    p.add_argument("--seed", type=_u64, default=None, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--checkpoint", type=Path, default=None, help="input checkpoint (stage2/stage3/eval)")
    p.add_argument("--modes", default=",".join(pipeline.MODES), help="eval modes, comma separated")
    p.add_argument("--scenes", type=int, default=None, help="number of held-out eval scenes")
    return p


def load_config(path, seed) -> RunConfig:
    cfg = parse_config(path) if path is not None else RunConfig()
    return cfg.with_overrides(seed=seed) if seed is not None else cfg


def _input_ckpt(args, wanted: tuple[str, ...]) -> Path:
    if args.checkpoint is not None:
        return args.checkpoint
    for stage in wanted:
        path = args.out / f"{stage}.ckpt"
        if path.is_file():
            return path
    names = " or ".join(f"{s}.ckpt" for s in wanted)
    raise TavpError(f"no input checkpoint: expected {names} in {args.out} (or pass --checkpoint)")


def _eval(cfg: RunConfig, args) -> dict:
    ckpt = pipeline.load_checkpoint(_input_ckpt(args, ("stage3", "stage2", "stage1")))
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    reports = [pipeline.evaluate(cfg, ckpt, m, n_scenes=args.scenes, out_dir=args.out) for m in modes]
    pipeline.write_eval_report(args.out, reports, cfg, ckpt.chain)
    return {r.mode: r.mean_success for r in reports}


def run(args) -> dict | None:
    cfg = load_config(args.config, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "stage1":
        pipeline.stage1(cfg, args.out, MetricsWriter(args.out))
    elif cmd == "stage2":
        pipeline.stage2(cfg, _input_ckpt(args, ("stage1",)), args.out, MetricsWriter(args.out))
    elif cmd == "stage3":
        pipeline.stage3(cfg, _input_ckpt(args, ("stage2",)), args.out, MetricsWriter(args.out))
    elif cmd == "eval":
        return _eval(cfg, args)
    elif cmd == "ablate":
        return pipeline.ablate(cfg, args.out)
    else:
        return {m: r.mean_success for m, r in pipeline.run_pipeline(cfg, args.out).items()}
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except ConfigError as exc:
        print(f"tavp: config error: {exc}", file=sys.stderr)
        return 2
    except TavpError as exc:
        print(f"tavp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
