# *******************************************************************************
# Copyright (c) 2026 Contributors to the bpu project
#
# See the NOTICE file(s) distributed with this work for additional
# information regarding copyright ownership.
#
# This program and the accompanying materials are made available under the
# terms of the Apache License Version 2.0 which is available at
# https://www.apache.org/licenses/LICENSE-2.0
#
# SPDX-License-Identifier: Apache-2.0
# *******************************************************************************
"""
Experiment harness.

Subcommands: ``gradcheck``, ``unlearn``, ``sweep``, ``complexity`` and
``report``. Exit codes are 0 (ok), 1 (configuration), 2 (divergence under a
halting guard, failed gradient check) and 3 (I/O).
"""

import argparse
import logging
import math
import os
import sys
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path
from typing import Any, NoReturn

import psutil

from bpu import artifacts
from bpu.adapters import AdaptedModel, attach_adapters
from bpu.complexity import DEFAULT_RANKS, benchmark_forward, rank_table
from bpu.config import ExperimentConfig, GuardMode, ModelKind, config_from_dict, expand_sweep, load_config
from bpu.core_math import RngStream
from bpu.diagnostics import (
    TraceRecord,
    component_growth_summary,
    detect_explosion,
    final_layer_selector,
    peak_to_running_median,
    scalar_selector,
    total_norm_selector,
)
from bpu.errors import ConfigError, ContractViolation, DivergenceError, NumericEvent
from bpu.evalkit import (
    DatasetSpec,
    EvalReport,
    ReferenceCache,
    SplitSpec,
    evaluate,
    generate,
    membership_disjoint,
    split,
    train_reference,
)
from bpu.gradcheck import run_gradcheck
from bpu.nnet import MlpParams, init_mlp
from bpu.transformer import ToyTransformerParams, init_transformer
from bpu.unlearn import Outcome, UnlearnSession, pretrain, run_unlearning

logger = logging.getLogger(__name__)

DEFAULT_OUT = "runs"
CACHE_DIR = "cache"
LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
# Attributes every LogRecord carries; anything else arrived through ``extra=``.
_RECORD_ATTRS = frozenset(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime", "taskName"}

# Fork labels under the master seed.
DATA_STREAM = 1
SPLIT_STREAM = 2
INIT_STREAM = 3
PRETRAIN_STREAM = 4
REFERENCE_STREAM = 5
ADAPTER_STREAM = 6
UNLEARN_STREAM = 7


class ExitCode(IntEnum):
    OK = 0
    CONFIG = 1
    DIVERGENCE = 2
    IO = 3


class ContextFormatter(logging.Formatter):
    """Renders the ``extra=`` context of a record after its message as ``key=value`` pairs."""

    def formatMessage(self, record: logging.LogRecord) -> str:  # noqa: N802
        line = super().formatMessage(record)
        context = sorted((k, v) for k, v in vars(record).items() if k not in _RECORD_ATTRS and not k.startswith("_"))
        if not context:
            return line
        return line + " " + " ".join(f"{k}={v}" for k, v in context)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise ConfigError(f"invalid arguments: {message}")


def configure_logging(quiet: bool = False) -> None:
    """Attaches a stderr handler to the ``bpu`` logger once."""
    root = logging.getLogger("bpu")
    root.setLevel(logging.WARNING if quiet else logging.INFO)
    if not any(getattr(h, "_bpu_cli", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(ContextFormatter(LOG_FORMAT, LOG_DATE_FORMAT))
        handler._bpu_cli = True  # type: ignore[attr-defined]
        root.addHandler(handler)


def resolve_out_root(flag: Path | None, cfg: ExperimentConfig) -> Path:
    if flag is not None:
        return flag
    if cfg.output.directory is not None:
        return Path(cfg.output.directory)
    env = os.environ.get("BPU_DEFAULT_OUT")
    return Path(env) if env else Path(DEFAULT_OUT)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else config_from_dict({})
    if args.seed is not None:
        cfg = config_from_dict(dict(cfg.to_dict(), seed=args.seed))
    return cfg


def build_model(cfg: ExperimentConfig, stream: RngStream) -> MlpParams | ToyTransformerParams:
    """Freshly initialized base model for the configured data shape."""
    m, d = cfg.model, cfg.data
    if m.kind is ModelKind.MLP:
        widths = [d.dim] + [m.hidden_width] * (m.depth - 1) + [d.num_classes]
        return init_mlp(stream, widths, m.activation, m.init_scale)
    return init_transformer(stream, d.dim, m.d_ff, d.num_classes, m.activation, m.init_scale)


@dataclass
class RunResult:
    run_dir: Path
    config_hash: str
    seed: int
    outcome: Outcome
    report: EvalReport | None

    @property
    def halted(self) -> bool:
        return self.outcome is not Outcome.COMPLETED

    def index_row(self, root: Path) -> dict[str, Any]:
        row: dict[str, Any] = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "run_dir": self.run_dir.relative_to(root).as_posix(),
            "outcome": self.outcome.value,
        }
        metrics = self.report.to_dict() if self.report is not None else {}
        row.update({name: metrics.get(name, math.nan) for name in artifacts.AGGREGATE_METRICS})
        return row


def run_dir_name(cfg: ExperimentConfig) -> str:
    return f"{artifacts.config_hash(cfg)[:12]}-seed{cfg.seed}"


def _explosions(history: Sequence[TraceRecord], cfg: ExperimentConfig) -> dict[str, dict[str, Any]]:
    if not history:
        return {}
    factor, window = cfg.diagnostics.explosion_factor, cfg.diagnostics.explosion_window
    selectors = {
        "final_layer.grad_fro": final_layer_selector("grad_fro"),
        "final_layer.weight_fro": final_layer_selector("weight_fro"),
        "total.grad_fro": total_norm_selector("grad_fro"),
        "logit_norm_mean": scalar_selector("logit_norm_mean"),
    }
    return {name: asdict(detect_explosion(history, sel, factor, window)) for name, sel in selectors.items()}


def execute_run(cfg: ExperimentConfig, out_root: Path, cache: ReferenceCache | None = None) -> RunResult:
    """
    One full experiment: data, original model, reference, unlearning,
    evaluation and artifacts under ``out_root/<hash>-seed<seed>/``.
    """
    started = time.perf_counter()
    key = artifacts.config_hash(cfg)
    run_dir = out_root / run_dir_name(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache = cache if cache is not None else ReferenceCache(out_root / CACHE_DIR)
    root = RngStream(cfg.seed)
    logger.info("run started", extra={"config_hash": key, "seed": cfg.seed, "run_dir": str(run_dir)})

    seq_len = cfg.model.seq_len if cfg.model.kind is ModelKind.TRANSFORMER else None
    data = generate(
        DatasetSpec(
            cfg.data.kind,
            cfg.data.n,
            cfg.data.num_classes,
            cfg.data.dim,
            cfg.data.noise,
            root.spawn(DATA_STREAM).seed,
            seq_len,
        )
    )
    retain, forget, holdout = split(
        data, SplitSpec(cfg.data.forget_fraction, cfg.data.holdout_fraction, root.spawn(SPLIT_STREAM).seed)
    )
    if len(forget) == 0:
        raise ContractViolation("forget split is empty", n=cfg.data.n, forget_fraction=cfg.data.forget_fraction)

    template = build_model(cfg, root.spawn(INIT_STREAM))
    adapter_kind = cfg.adapter.adapter_kind()
    original = attach_adapters(template, [], adapter_kind, 1, root.spawn(ADAPTER_STREAM), full_finetune=True)
    pretrain_losses = pretrain(original, retain.union(forget), cfg.pretrain, root.spawn(PRETRAIN_STREAM))
    reference = train_reference(
        retain, template, cfg.pretrain, root.spawn(REFERENCE_STREAM), cache, artifacts.reference_key(cfg)
    )
    audit = membership_disjoint(retain, forget)
    original_report = evaluate(original, reference, retain, forget, holdout)

    model: AdaptedModel = attach_adapters(
        original.effective_params(),
        cfg.adapter.resolved_targets(cfg.model),
        adapter_kind,
        cfg.adapter.rank,
        root.spawn(ADAPTER_STREAM),
        full_finetune=cfg.adapter.full_finetune,
    )
    theorem_layer = cfg.diagnostics.theorem_layer if cfg.diagnostics.theorem_checks else None
    session = UnlearnSession(
        model,
        retain,
        forget,
        cfg.train_config(),
        root.spawn(UNLEARN_STREAM),
        check_every=cfg.diagnostics.check_every,
        theorem_layer=theorem_layer if cfg.model.kind is ModelKind.MLP else None,
        check_bounds=cfg.diagnostics.check_bounds,
    )
    result = run_unlearning(session)
    final_report: EvalReport | None = None
    try:
        final_report = evaluate(result.model, reference, retain, forget, holdout)
    except NumericEvent as exc:
        logger.warning("final model could not be evaluated", extra={"detail": str(exc)})

    history = result.history
    growth = {}
    spike = None
    if history:
        window = cfg.diagnostics.explosion_window
        growth = {c: component_growth_summary(history, c, window) for c in sorted(history[0].components)}
        spike = peak_to_running_median(history, total_norm_selector("grad_fro"), window)
    summary = {
        "config": cfg.to_dict(),
        "config_hash": key,
        "seed": cfg.seed,
        "outcome": result.outcome.value,
        "stopped_at": result.stopped_at,
        "iterations_run": len(history),
        "guard_events": result.guard_events,
        "bound_violations": result.bound_violations,
        "margin_violations": sum(rec.margin_violations for rec in history),
        "trainable_parameters": result.model.trainable_count(),
        "membership_audit_disjoint": audit,
        "pretrain_final_loss": pretrain_losses[-1] if pretrain_losses else None,
        "original": original_report.to_dict(),
        "final": final_report.to_dict() if final_report is not None else None,
        "explosions": _explosions(history, cfg),
        "component_growth": growth,
        "gradient_spike": spike,
        "assumptions": [dict(asdict(rec.assumptions), iter=rec.iter) for rec in history if rec.assumptions is not None],
        "wall_clock": "timing.json",
    }

    artifacts.write_scalars(run_dir / "scalars.csv", history)
    if cfg.output.emit_norms:
        artifacts.write_norms(run_dir / "norms.csv", history)
    artifacts.write_json(run_dir / "summary.json", summary)
    if cfg.output.snapshot:
        artifacts.write_snapshot(run_dir / "original.npz", original.snapshot())
        artifacts.write_snapshot(run_dir / "unlearned.npz", result.model.snapshot())
    artifacts.write_json(
        run_dir / "timing.json",
        {"wall_clock_seconds": time.perf_counter() - started, "rss_bytes": psutil.Process().memory_info().rss},
    )
    logger.info(
        "run finished",
        extra={"config_hash": key, "seed": cfg.seed, "outcome": result.outcome.value, "iterations": len(history)},
    )
    return RunResult(run_dir, key, cfg.seed, result.outcome, final_report)


def _exit_for(cfg: ExperimentConfig, results: Sequence[RunResult]) -> ExitCode:
    if cfg.diagnostics.guard.mode is GuardMode.HALT and any(r.halted for r in results):
        return ExitCode.DIVERGENCE
    return ExitCode.OK


def cmd_gradcheck(cfg: ExperimentConfig, out_root: Path) -> ExitCode:
    report = run_gradcheck(cfg.gradcheck, cfg.seed)
    document = {"seed": cfg.seed, "passed": report.ok, "suites": report.to_dict()}
    artifacts.write_json(out_root / "gradcheck.json", document)
    sys.stdout.write(artifacts.dumps_json(document))
    return ExitCode.OK if report.ok else ExitCode.DIVERGENCE


def cmd_unlearn(cfg: ExperimentConfig, out_root: Path) -> ExitCode:
    result = execute_run(cfg, out_root)
    sys.stdout.write(f"{result.run_dir}\n")
    return _exit_for(cfg, [result])


def _sweep_cell(payload: tuple[dict[str, Any], str]) -> RunResult:
    data, out_root = payload
    return execute_run(config_from_dict(data), Path(out_root))


def cmd_sweep(cfg: ExperimentConfig, out_root: Path) -> ExitCode:
    """
    Runs every grid cell for every seed, then writes ``index.csv`` and
    ``aggregate.csv`` in ``out_root``.
    """
    cells = [cell for cell, _ in expand_sweep(cfg)]
    logger.info("sweep started", extra={"cells": len(cells), "jobs": cfg.sweep.jobs})
    if cfg.sweep.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.sweep.jobs) as pool:
            results = list(pool.map(_sweep_cell, [(c.to_dict(), str(out_root)) for c in cells]))
    else:
        cache = ReferenceCache(out_root / CACHE_DIR)
        results = []
        for cell in cells:
            results.append(execute_run(cell, out_root, cache))
            logger.info("sweep cell finished", extra={"run_dir": str(results[-1].run_dir)})
    rows = [r.index_row(out_root) for r in results]
    artifacts.write_index(out_root / "index.csv", rows)
    artifacts.write_aggregate(out_root / "aggregate.csv", rows)
    sys.stdout.write(f"{out_root / 'index.csv'}\n")
    return _exit_for(cfg, results)


COMPLEXITY_HEADER = (
    "r",
    "param_count",
    "base_ops",
    "lowrank_ops",
    "sine_ops",
    "total_forward_ops",
    "backward_extra_ops",
    "overhead_ratio",
    "attention_ratio",
)


def cmd_complexity(
    d: int, k: int, ranks: Sequence[int], seq_len: int | None, benchmark_dim: int | None = None
) -> ExitCode:
    lines = [",".join(COMPLEXITY_HEADER)]
    for row in rank_table(d, k, tuple(ranks), seq_len):
        ratio = "" if row.attention_ratio is None else artifacts.format_float(row.attention_ratio)
        cells = [row.r, row.param_count, row.base_ops, row.lowrank_ops, row.sine_ops, row.total_forward_ops]
        cells.append(row.backward_extra_ops)
        lines.append(",".join([*map(str, cells), artifacts.format_float(row.overhead_ratio), ratio]))
    if benchmark_dim is not None:
        lines.append("")
        lines.append("r,forward_seconds")
        timings = benchmark_forward(benchmark_dim, benchmark_dim, tuple(r for r in ranks if r <= benchmark_dim))
        lines.extend(f"{r},{artifacts.format_float(s)}" for r, s in timings.items())
    sys.stdout.write("\n".join(lines) + "\n")
    return ExitCode.OK


def cmd_report(run_dir: Path) -> ExitCode:
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    written = artifacts.write_plot_data(run_dir)
    sys.stdout.write("".join(f"{p}\n" for p in written))
    return ExitCode.OK


def _ranks(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text}") from exc
    if not values:
        raise argparse.ArgumentTypeError("at least one rank is required")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file.")
    common.add_argument("--seed", type=int, help="Master seed, overrides the configuration.")
    common.add_argument("--out", type=Path, help="Output root directory.")
    common.add_argument("--quiet", action="store_true", help="Log warnings and errors only.")

    parser = _Parser(prog="bpu", description="Bounded parameter-efficient unlearning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient checks.")
    sub.add_parser("unlearn", parents=[common], help="One unlearning run.")
    sub.add_parser("sweep", parents=[common], help="Grid of unlearning runs.")

    cx = sub.add_parser("complexity", parents=[common], help="Adapter cost table.")
    cx.add_argument("--d", type=int, default=4096, help="Input width. Default: %(default)s")
    cx.add_argument("--k", type=int, default=11008, help="Output width. Default: %(default)s")
    cx.add_argument("--ranks", type=_ranks, default=list(DEFAULT_RANKS), help="Comma-separated ranks.")
    cx.add_argument("--seq-len", type=int, default=512, help="Sequence length. Default: %(default)s")
    cx.add_argument("--benchmark", action="store_true", help="Also time one adapter forward per rank.")
    cx.add_argument("--benchmark-dim", type=int, default=128, help="Square size used by --benchmark.")

    rp = sub.add_parser("report", parents=[common], help="Plot-ready data for a run directory.")
    rp.add_argument("run_dir", type=Path)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.quiet)
        match args.command:
            case "complexity":
                bench = args.benchmark_dim if args.benchmark else None
                return cmd_complexity(args.d, args.k, args.ranks, args.seq_len, bench)
            case "report":
                return cmd_report(args.run_dir)
        cfg = _load(args)
        out_root = resolve_out_root(args.out, cfg)
        match args.command:
            case "gradcheck":
                return cmd_gradcheck(cfg, out_root)
            case "unlearn":
                return cmd_unlearn(cfg, out_root)
            case _:
                return cmd_sweep(cfg, out_root)
    except (ConfigError, ContractViolation) as exc:
        logger.error("configuration rejected", extra={"detail": str(exc)})
        sys.stderr.write(f"bpu: {exc}\n")
        return ExitCode.CONFIG
    except DivergenceError as exc:
        logger.error("run diverged", extra={"detail": str(exc)})
        sys.stderr.write(f"bpu: {exc}\n")
        return ExitCode.DIVERGENCE
    except OSError as exc:
        logger.error("i/o failure", extra={"detail": str(exc)})
        sys.stderr.write(f"bpu: {exc}\n")
        return ExitCode.IO
