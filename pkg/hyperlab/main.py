from __future__ import annotations

import asyncio
import csv
import json
import os
import sys
import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from hyperlab.adapters import AdapterKind, expected_param_count
from hyperlab.checkpoint import (
    apply_adapter,
    describe_adapter,
    load_adapter,
    load_model_weights,
    save_adapter,
    save_model_weights,
)
from hyperlab.experiments import (
    ExperimentConfig,
    get_experiment,
    get_experiments,
    load_experiment,
    train_json,
)
from hyperlab.git_utils import format_inputs_hash
from hyperlab.globals import ctx, parse_options_and_set_ctx
from hyperlab.model import Model, adapter_map_for
from hyperlab.rank_analysis import (
    RankReport,
    analyze_model,
    mean_r_hat,
    write_report_csv,
    write_report_json,
    write_report_svg,
)
from hyperlab.tasks import RegressionTask, Task, build_task, pretrain_model
from hyperlab.training import TrainResult, train, with_seed
from hyperlab.utils import (
    HyperlabError,
    Style,
    TrainingAborted,
    debug_print,
    format_float,
    reset_semaphore,
    run_in_thread,
)

VERSION = "0.1.0"
SUMMARY_COLUMNS = (
    "adapter",
    "trainable_params",
    "param_fraction",
    "mean_final_loss_or_acc",
    "std",
    "mean_r_hat",
)
FAILED_MARKER = ".failed"


@dataclass(eq=False)
class SeedSetup:
    seed: int
    task: Task
    base: Model
    pretrain: TrainResult | None = None


@dataclass(eq=False)
class CellResult:
    kind: AdapterKind
    seed: int
    trainable_params: int
    base_params: int
    metric: float
    report: RankReport | None
    failed: str | None = None

    @property
    def r_hat(self) -> float:
        return mean_r_hat(self.report) if self.report is not None else float("nan")


def cell_dir(output_dir: Path, kind: AdapterKind, seed: int) -> Path:
    slug = str(kind).replace("(", "-").replace(")", "")
    return output_dir / slug / f"seed-{seed}"


def closed_form_params(model: Model) -> int:
    total = sum(
        expected_param_count(layer.kind, *layer.shape, train_bias=layer.train_bias)
        for layer in model.layers.values()
    )
    if model.train_extras:
        total += sum(v.size for v in model.extras.values())
    return total


# ==============================
# run
# ==============================


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedSetup:
    task = build_task(config.task, seed)
    if isinstance(task, RegressionTask):
        return SeedSetup(seed, task, task.base_model())
    if config.pretrain is not None:
        pretrain_task = build_task(config.pretrain.task, seed)
        base, result = pretrain_model(
            config.model.arch, pretrain_task, with_seed(config.pretrain.train, seed), seed
        )
        return SeedSetup(seed, task, base, result)
    return SeedSetup(seed, task, Model.init(config.model.arch, seed))


def _write_loss_csv(result_dir: Path, loss_curve: list[float], lr_curve: list[float]) -> None:
    with open(result_dir / "loss.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("step", "lr", "loss"))
        for step, loss in enumerate(loss_curve):
            lr = format_float(lr_curve[step]) if step < len(lr_curve) else ""
            writer.writerow((step, lr, format_float(loss)))


def _write_json(path: Path, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def run_cell(config: ExperimentConfig, setup: SeedSetup, kind: AdapterKind) -> CellResult:
    """Train one (adapter, seed) cell and persist everything under its own directory."""
    result_dir = cell_dir(config.output_dir, kind, setup.seed)
    result_dir.mkdir(parents=True, exist_ok=True)
    marker = result_dir / FAILED_MARKER

    arch = config.model.arch
    model = setup.base.adapt(
        adapter_map_for(arch, kind, config.model.targets),
        lora=config.lora,
        train_bias=config.model.train_bias,
        seed=setup.seed,
    )
    trainable = model.parameter_count()
    assert trainable == closed_form_params(model), "parameter count differs from closed form"
    base_params = model.base_parameter_count()

    train_config = config.train_config(kind, setup.seed)
    try:
        result = train(model, setup.task.train, train_config, eval_data=setup.task.eval)
    except TrainingAborted as e:
        _write_loss_csv(result_dir, e.loss_curve, [])
        marker.write_text(f"step {e.step}: {e}\n", encoding="utf-8")
        return CellResult(kind, setup.seed, trainable, base_params, float("nan"), None, str(e))
    if marker.exists():
        marker.unlink()

    save_adapter(model, result_dir / "checkpoint.json")
    _write_loss_csv(result_dir, result.loss_curve, result.lr_curve)
    report = analyze_model(setup.base, model, config.analysis.rank_threshold)
    write_report_json(report, result_dir / "rank.json")
    write_report_csv(report, result_dir / "rank.csv")
    _write_json(
        result_dir / "result.json",
        {
            "adapter": str(kind),
            "seed": setup.seed,
            "steps": len(result.loss_curve),
            "threads": ctx.get().threads,
            "train_config": {**train_json(train_config), "seed": train_config.seed},
            "loss_curve": result.loss_curve,
            "trainable_params": trainable,
            "base_params": base_params,
            "train_loss": result.train_eval.loss,
            "train_accuracy": result.train_eval.accuracy,
            "eval_loss": result.eval.loss if result.eval else None,
            "eval_accuracy": result.eval.accuracy if result.eval else None,
            "final_metric": result.final_metric,
            "mean_r_hat": mean_r_hat(report),
            "checksums": result.checksums(),
        },
    )
    return CellResult(kind, setup.seed, trainable, base_params, result.final_metric, report)


def write_summary(path: Path, config: ExperimentConfig, cells: list[CellResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for kind in config.adapters:
            group = [c for c in cells if c.kind == kind]
            ok = [c for c in group if c.failed is None]
            metrics = np.array([c.metric for c in ok], dtype=np.float64)
            r_hats = np.array([c.r_hat for c in ok], dtype=np.float64)
            nan = float("nan")
            writer.writerow(
                (
                    str(kind),
                    group[0].trainable_params,
                    format_float(group[0].trainable_params / group[0].base_params),
                    format_float(metrics.mean() if ok else nan),
                    format_float(metrics.std() if ok else nan),
                    format_float(r_hats.mean() if ok else nan),
                )
            )


def _status_line(k: int, total: int, cell: CellResult, seconds: float) -> str:
    head = f"[{k}/{total}] {cell.kind} seed={cell.seed}"
    if cell.failed is not None:
        return f"{Style.RED}{head} failed: {cell.failed}{Style.RESET}"
    return f"{head} metric={cell.metric:.6g} r_hat={cell.r_hat:.3f} ({seconds:.2f}s)"


async def run_experiment(config: ExperimentConfig, *, emit_svg: bool = True) -> int:
    reset_semaphore()
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    config_bytes = config.canonical_bytes()
    (out / "config.json").write_bytes(config_bytes)
    inputs = {"config.json": config_bytes, "VERSION": f"hyperlab {VERSION}\n".encode()}
    (out / "inputs.sha256").write_text(format_inputs_hash(inputs), encoding="utf-8")

    setups_timed = await asyncio.gather(
        *(
            run_in_thread(prepare_seed, config, seed, label=f"prepare seed {seed}")
            for seed in config.seeds
        )
    )
    setups = [s for s, _ in setups_timed]
    for setup in setups:
        save_model_weights(setup.base, out / "base" / f"seed-{setup.seed}")
        if setup.pretrain is not None:
            print(
                f"pretrained seed={setup.seed} "
                f"metric={setup.pretrain.final_metric:.6g} "
                f"({setup.pretrain.wallclock:.2f}s)"
            )

    total = len(config.adapters) * len(setups)
    done = 0

    async def inner(kind: AdapterKind, setup: SeedSetup) -> CellResult:
        nonlocal done
        cell, seconds = await run_in_thread(
            run_cell, config, setup, kind, label=f"{kind} seed {setup.seed}"
        )
        done += 1
        print(_status_line(done, total, cell, seconds))
        return cell

    cells = await asyncio.gather(
        *(inner(kind, setup) for kind in config.adapters for setup in setups)
    )

    write_summary(out / "summary.csv", config, list(cells))
    if emit_svg and config.analysis.emit_svg:
        reports = {}
        for kind in config.adapters:
            records = tuple(
                record
                for c in cells
                if c.kind == kind and c.report is not None
                for record in c.report.records
            )
            reports[str(kind)] = RankReport(config.analysis.rank_threshold, records)
        write_report_svg(reports, out / "rank.svg")
    if ctx.get().debug:
        debug_print(f"wrote {out}")

    failed = [c for c in cells if c.failed is not None]
    if failed:
        print(f"{Style.RED}{len(failed)} of {total} cells failed{Style.RESET}")
        return 3
    print(f"{Style.GREEN}wrote {out / 'summary.csv'}{Style.RESET}")
    return 0


# ==============================
# other verbs
# ==============================


def inspect_checkpoint(path: Path) -> int:
    for line in describe_adapter(load_adapter(path)):
        print(line)
    return 0


def merge_checkpoint(checkpoint: Path, base_dir: Path, out_dir: Path) -> int:
    adapted = apply_adapter(load_model_weights(base_dir), load_adapter(checkpoint))
    save_model_weights(adapted, out_dir)
    print(f"wrote merged weights to {out_dir}")
    return 0


def rank_weights(before: Path, after: Path, threshold: float) -> int:
    report = analyze_model(load_model_weights(before), load_model_weights(after), threshold)
    print(f"threshold={report.threshold:g} rank_w0_rtol={report.rank_rtol:g}")
    print(f"{'layer':<24} {'n':>5} {'m':>5} {'rank_w0':>8} {'count':>6} {'r_hat':>7}")
    for r in report.records:
        print(f"{r.layer:<24} {r.n:>5} {r.m:>5} {r.rank_w0:>8} {r.count:>6} {r.r_hat:>7.3f}")
    for name in report.skipped:
        print(f"{Style.DIM}{name}: skipped, frozen weight has rank 0{Style.RESET}")
    if report.records:
        mean = float(np.mean([r.r_hat for r in report.records]))
        print(f"mean r_hat: {mean:.4f}")
    return 0


def list_experiments() -> int:
    for name, config in get_experiments().items():
        adapters = ", ".join(str(k) for k in config.adapters)
        pretrain = f" (pretrained on {config.pretrain.task.kind})" if config.pretrain else ""
        print(f"{Style.BOLD}{name}{Style.RESET}: {config.task.kind}{pretrain}; {adapters}")
    return 0


def load_run_config() -> ExperimentConfig:
    args = ctx.get()
    if args.preset is not None:
        config = get_experiment(args.preset)
    else:
        assert args.config is not None
        config = load_experiment(args.config)
    if args.output is not None:
        config = replace(config, output_dir=args.output)
    if args.seeds is not None:
        config = replace(config, seeds=tuple(args.seeds))
    return config


def cli(argv: list[str]) -> int:
    def inner() -> int:
        ARGS = parse_options_and_set_ctx(argv)
        if ARGS.command == "run":
            return asyncio.run(run_experiment(load_run_config(), emit_svg=not ARGS.no_svg))
        if ARGS.command == "inspect":
            assert ARGS.checkpoint is not None
            return inspect_checkpoint(ARGS.checkpoint)
        if ARGS.command == "merge":
            assert ARGS.checkpoint and ARGS.base_model and ARGS.out
            return merge_checkpoint(ARGS.checkpoint, ARGS.base_model, ARGS.out)
        if ARGS.command == "rank":
            assert ARGS.before and ARGS.after
            return rank_weights(ARGS.before, ARGS.after, ARGS.threshold)
        return list_experiments()

    try:
        return inner()
    except HyperlabError as e:
        print(f"{Style.RED}error: {e}{Style.RESET}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"{Style.RED}error: {e}{Style.RESET}", file=sys.stderr)
        return 4
    except Exception:
        traceback.print_exc()
        return 70


def main() -> None:
    if sys.platform == "win32":
        # Enables ANSI escape characters in terminal without resorting to ctypes or colorama
        os.system("")
    sys.exit(cli(sys.argv[1:]))
