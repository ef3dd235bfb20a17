from __future__ import annotations

import argparse
import contextvars
import os
from dataclasses import dataclass
from pathlib import Path


@dataclass
class _Args:
    command: str = "run"

    # run
    config: Path | None = None
    preset: str | None = None
    output: Path | None = None
    seeds: list[int] | None = None
    no_svg: bool = False

    # inspect / merge
    checkpoint: Path | None = None
    base_model: Path | None = None
    out: Path | None = None

    # rank
    before: Path | None = None
    after: Path | None = None
    threshold: float = 1e-2

    # shared by every command
    threads: int = 1
    debug: bool = False


ctx = contextvars.ContextVar[_Args]("args")


def _seed_list(value: str) -> list[int]:
    try:
        seeds = [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list: {value!r}") from None
    return seeds


def _default_threads() -> int:
    env = os.environ.get("HYPERLAB_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def parse_options(argv: list[str]) -> _Args:
    common = argparse.ArgumentParser(add_help=False)
    common_group = common.add_argument_group("lab")
    common_group.add_argument(
        "--threads",
        type=int,
        default=None,
        help="number of (adapter, seed) cells to run at a time (env: HYPERLAB_THREADS)",
    )
    common_group.add_argument("--debug", action="store_true", help="print progress details")

    parser = argparse.ArgumentParser(
        prog="hyperlab",
        description="desk-scale lab for diagonal-scaling and low-rank fine-tuning",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser(
        "run", parents=[common], help="train every (adapter, seed) cell of an experiment"
    )
    source = run_parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=Path, help="path to a JSON experiment config")
    source.add_argument("--preset", help="name of a built-in experiment (see `hyperlab list`)")
    run_parser.add_argument("--output", type=Path, help="overrides output_dir from the config")
    run_parser.add_argument(
        "--seeds", type=_seed_list, help="comma separated seeds, overrides the config"
    )
    run_parser.add_argument("--no-svg", action="store_true", help="skip the rank chart")

    inspect_parser = subparsers.add_parser(
        "inspect", parents=[common], help="describe an adapter checkpoint"
    )
    inspect_parser.add_argument("checkpoint", type=Path)

    merge_parser = subparsers.add_parser(
        "merge", parents=[common], help="fold an adapter checkpoint into dense weights"
    )
    merge_parser.add_argument("checkpoint", type=Path)
    merge_parser.add_argument("base_model", type=Path, help="model weight directory")
    merge_parser.add_argument("out", type=Path, help="output model weight directory")

    rank_parser = subparsers.add_parser(
        "rank", parents=[common], help="normalized update rank between two weight directories"
    )
    rank_parser.add_argument("before", type=Path)
    rank_parser.add_argument("after", type=Path)
    rank_parser.add_argument(
        "--threshold", type=float, default=1e-2, help="absolute singular value cutoff"
    )

    subparsers.add_parser("list", parents=[common], help="list built-in experiments")

    ns = vars(parser.parse_args(argv))
    if ns.get("threads") is None:
        try:
            ns["threads"] = _default_threads()
        except ValueError:
            env = os.environ["HYPERLAB_THREADS"]
            parser.error(f"HYPERLAB_THREADS must be an integer, got {env!r}")
    ret = _Args(**ns)
    if ret.threads < 1:
        parser.error("--threads must be positive")
    if ret.command == "rank" and ret.threshold <= 0:
        parser.error("--threshold must be positive")
    return ret


def parse_options_and_set_ctx(argv: list[str]) -> _Args:
    args = parse_options(argv)
    ctx.set(args)
    return args
