"""Command-line entry point: ``unlearnlab <command> [--config FILE] [flags]``.

Exit codes: 0 success, 2 usage error, 3 config error, 4 I/O or corrupt
artifact, 5 nothing to unlearn (degenerate gradients or search failure),
6 provenance mismatch between artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import container, pipeline
from .config import RunConfig, load_config
from .data import ConfigurationError, EmptySplitError
from .evalbench.gapratio import TableFormatError, UndefinedGapRatioError
from .model import DegenerateEmbeddingError
from .numerics import DegenerateVectorError
from .objectives import FingerprintMismatchError
from .unlearn import NoCandidateError, SearchAborted

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NO_CANDIDATE, EXIT_PROVENANCE = 0, 2, 3, 4, 5, 6

COMMANDS = {
    "gen-data": pipeline.stage_gen_data,
    "train": pipeline.stage_train,
    "grad": pipeline.stage_grad,
    "select": pipeline.stage_select,
    "unlearn": pipeline.stage_unlearn,
    "joint-unlearn": pipeline.stage_joint,
    "baseline": pipeline.stage_baseline,
    "eval": pipeline.stage_eval,
    "sweep": pipeline.stage_sweep,
    "gapratio": pipeline.stage_gapratio,
    "run": pipeline.stage_run,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnlab", description="Single-layer unlearning lab on a toy dual encoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} stage")
        p.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="artifact directory")
        p.add_argument("--concepts", type=_int_list, help="target concept ids, e.g. 0,3")
        p.add_argument("--strategy")
        p.add_argument("--steps", type=int, help="binary-search steps")
        p.add_argument("--val-fraction", type=float)
        p.add_argument("--topk", type=int, choices=(1, 5), help="top-k forget accuracy used by the search")
        p.add_argument("--lambda-grid", type=_float_list, help="comma-separated step sizes for sweep")
        if name == "gapratio":
            p.add_argument("--table", help="benchmark CSV (default: the shipped fixture)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig.from_dict()
    return cfg.with_overrides(**{
        "seed": args.seed,
        "out": args.out,
        "unlearn.concepts": args.concepts,
        "unlearn.strategy": args.strategy,
        "unlearn.steps": args.steps,
        "unlearn.val_fraction": args.val_fraction,
        "unlearn.topk": args.topk,
        "sweep.lambda_grid": args.lambda_grid,
    })


def _summary_line(command: str, result) -> str | None:
    if isinstance(result, dict):
        return json.dumps(result, sort_keys=True)
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        pipeline.prepare_out(cfg)
        if args.command == "gapratio":
            result = pipeline.stage_gapratio(cfg, args.table)
        else:
            result = COMMANDS[args.command](cfg)
    except (ConfigurationError, EmptySplitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.ProvenanceError, FingerprintMismatchError) as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except (NoCandidateError, SearchAborted, DegenerateEmbeddingError, DegenerateVectorError,
            UndefinedGapRatioError) as exc:
        print(f"no candidate: {exc}", file=sys.stderr)
        return EXIT_NO_CANDIDATE
    except (OSError, container.CorruptFileError, container.UnsupportedVersionError, container.WrongKindError,
            TableFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    line = _summary_line(args.command, result)
    if line and args.verbose:
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
