"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``), applies flag
overrides on top, validates the result, and only then starts work. Failures
print one JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import pipeline
from .checkpoint import CheckpointError
from .corpus import SPLITS
from .fusion import POLICIES, STRATEGIES
from .pipeline import GRIDS, ConfigError, RunConfig

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print free text and exit 2
        raise UsageError(message)


def _csv(kind):
    def parse(text: str) -> list:
        try:
            return [kind(v) for v in text.split(",") if v]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="valtiming", description="Validation-timing detection pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name: str, help: str, out: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="seed for every stage")
        if out:
            p.add_argument("--out", type=Path, required=True, help="run directory to create")
        return p

    command("gen-corpus", "render the synthetic corpus")

    p = command("fit-units", "fit k-means units on training MFCCs")
    p.add_argument("--corpus")

    p = command("pretrain", "masked unit prediction pretraining")
    p.add_argument("--corpus")
    p.add_argument("--units", help="kmeans.bin from fit-units")

    p = command("train-emotion", "multi-task emotion/sentiment training")
    p.add_argument("--corpus")

    for name, help in (("train-timing", "train the timing classifier"), ("ablate", "run comparison grids")):
        p = command(name, help)
        p.add_argument("--corpus")
        p.add_argument("--para", help="paralinguistic encoder checkpoint (pretrain output)")
        p.add_argument("--emo", help="emotion encoder checkpoint (train-emotion output)")
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--policy-para", choices=POLICIES)
        p.add_argument("--policy-emo", choices=POLICIES)
    p.add_argument("--grid", type=_csv(str), default=["fusion", "policy"],
                   help=f"comma-separated subset of {','.join(GRIDS)}")
    p.add_argument("--seeds", type=_csv(int), help="comma-separated seeds; defaults to --seed")

    p = command("evaluate", "metrics table for a timing checkpoint", out=False)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--json", action="store_true", help="print the full report as JSON")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    over: dict[str, Any] = {}
    if args.seed is not None:
        over["seed"] = args.seed
    paths = {k: getattr(args, k) for k in ("corpus", "units", "para", "emo", "checkpoint") if getattr(args, k, None)}
    if paths:
        over["paths"] = paths
    timing: dict[str, Any] = {}
    if getattr(args, "strategy", None):
        timing["fusion"] = {"strategy": args.strategy}
    policies = {b: getattr(args, f"policy_{b}", None) for b in ("para", "emo")}
    if any(policies.values()):
        timing["policies"] = {b: p for b, p in policies.items() if p}
    if timing:
        over["timing"] = timing
    return over


def resolve_config(args: argparse.Namespace) -> RunConfig:
    over = _overrides(args)
    cfg = pipeline.load_config(args.config, None)
    # policy flags update single branches instead of replacing the pair
    if "timing" in over and "policies" in over["timing"]:
        over["timing"]["policies"] = {**cfg.timing.policies, **over["timing"]["policies"]}
    return pipeline.load_config(args.config, over)


def _need(value: str | None, what: str) -> str:
    if not value:
        raise ConfigError(f"missing input: {what}")
    if not Path(value).exists():
        raise FileNotFoundError(f"{what} not found: {value}")
    return value


def _encoder_paths(cfg: RunConfig, branches) -> dict[str, str]:
    flags = {"para": "--para", "emo": "--emo"}
    return {b: _need(getattr(cfg.paths, b), f"{b} encoder checkpoint ({flags[b]})") for b in branches}


def dispatch(args: argparse.Namespace) -> Any:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "gen-corpus":
        return pipeline.run_gen_corpus(cfg, args.out)
    if cmd == "evaluate":
        report = pipeline.run_evaluate(
            _need(cfg.paths.checkpoint, "timing checkpoint (--checkpoint)"),
            _need(cfg.paths.corpus, "corpus directory (--corpus)"),
            args.split,
            cfg.timing.eval_batch_size,
        )
        print(json.dumps(report, sort_keys=True) if args.json else report["table"])
        return report
    corpus = _need(cfg.paths.corpus, "corpus directory (--corpus)")
    if cmd == "fit-units":
        return pipeline.run_fit_units(cfg, corpus, args.out)
    if cmd == "pretrain":
        return pipeline.run_pretrain(cfg, corpus, _need(cfg.paths.units, "k-means model (--units)"), args.out)
    if cmd == "train-emotion":
        return pipeline.run_train_emotion(cfg, corpus, args.out)
    if cmd == "train-timing":
        return pipeline.run_train_timing(cfg, corpus, _encoder_paths(cfg, cfg.timing.fusion.branches), args.out)
    if cmd == "ablate":
        unknown = [g for g in args.grid if g not in GRIDS]
        if unknown or not args.grid:
            raise UsageError(f"--grid must be a comma-separated subset of {','.join(GRIDS)}")
        branches = {b for g in args.grid for _, c in pipeline.grid_cells(g, cfg) for b in c.timing.fusion.branches}
        report = pipeline.run_ablate(cfg, corpus, _encoder_paths(cfg, sorted(branches)), args.grid, args.out, args.seeds)
        for grid, body in report["grids"].items():
            print(f"[{grid}]\n{body['table']}")
        return report
    raise UsageError(f"unknown command {cmd!r}")  # unreachable: argparse restricts choices


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    try:
        dispatch(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except (FileNotFoundError, FileExistsError) as exc:
        return _fail("input", str(exc), EXIT_FAILURE)
    except CheckpointError as exc:
        return _fail("checkpoint", str(exc), EXIT_FAILURE)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
