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
Run artifact writers.

Floats are written in Python's shortest round-trip form (``repr``). CSV files
use ``\\n`` line endings; JSON documents are sorted, indented by two spaces
and end with a newline, with non-finite numbers written as ``null``.
"""

import csv
import hashlib
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from bpu.config import ExperimentConfig
from bpu.diagnostics import TraceRecord

logger = logging.getLogger(__name__)

SCALARS_HEADER: tuple[str, ...] = ("iter", "loss_retain", "loss_forget", "logit_norm_mean", "margin_mean", "guard_flag")
NORMS_HEADER: tuple[str, ...] = ("iter", "layer_id", "layer_name", "component", "metric", "value")
AGGREGATE_METRICS: tuple[str, ...] = (
    "forget_quality_proxy",
    "model_utility_proxy",
    "membership_attack_acc",
    "forget_acc",
)
INDEX_HEADER: tuple[str, ...] = ("config_hash", "seed", "run_dir", "outcome", *AGGREGATE_METRICS)
PLOTS_DIR = "plots"


def format_float(value: float) -> str:
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def _sanitize(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_sanitize(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj), encoding="utf-8")
    return path


def config_hash(cfg: ExperimentConfig) -> str:
    """
    Git blob SHA-1 of the canonical JSON config without the master seed.
    """
    data = cfg.to_dict()
    data.pop("seed", None)
    payload = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_scalars(path: Path, history: Sequence[TraceRecord]) -> Path:
    rows = (
        (
            str(rec.iter),
            format_float(rec.loss_retain),
            format_float(rec.loss_forget),
            format_float(rec.logit_norm_mean),
            format_float(rec.margin_mean),
            "1" if rec.guard_flag else "0",
        )
        for rec in history
    )
    return _write_rows(path, SCALARS_HEADER, rows)


def write_norms(path: Path, history: Sequence[TraceRecord]) -> Path:
    """One row per norm entry, ordered by (iter, layer id, component, metric)."""
    rows = (
        (str(rec.iter), str(e.layer_id), e.layer_name, e.component, e.metric, format_float(e.value))
        for rec in history
        for e in rec.norms
    )
    return _write_rows(path, NORMS_HEADER, rows)


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_snapshot(path: Path, arrays: Mapping[str, npt.NDArray[np.float64]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **dict(arrays))
    return path


def write_plot_data(run_dir: Path) -> list[Path]:
    """
    Two-column ``iter value`` files under ``plots/``: one per scalar column of
    ``scalars.csv`` and one per (layer, metric) of ``norms.csv`` when present.
    """
    out_dir = run_dir / PLOTS_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    series: dict[str, list[tuple[str, str]]] = {}
    for row in read_csv(run_dir / "scalars.csv"):
        for column in SCALARS_HEADER[1:]:
            series.setdefault(column, []).append((row["iter"], row[column]))
    norms_path = run_dir / "norms.csv"
    if norms_path.is_file():
        for row in read_csv(norms_path):
            key = f"{row['layer_name']}.{row['metric']}"
            series.setdefault(key, []).append((row["iter"], row["value"]))
    written = []
    for name in sorted(series):
        path = out_dir / f"{name}.dat"
        path.write_text("".join(f"{it} {value}\n" for it, value in series[name]), encoding="utf-8")
        written.append(path)
    logger.info("plot data written", extra={"run_dir": str(run_dir), "files": len(written)})
    return written


def write_index(path: Path, rows: Sequence[Mapping[str, Any]]) -> Path:
    """Sweep index sorted by (config hash, seed)."""
    ordered = sorted(rows, key=lambda r: (r["config_hash"], int(r["seed"])))
    return _write_rows(
        path,
        INDEX_HEADER,
        (tuple(format_float(r[c]) if isinstance(r[c], float) else str(r[c]) for c in INDEX_HEADER) for r in ordered),
    )


def write_aggregate(path: Path, rows: Sequence[Mapping[str, Any]]) -> Path:
    """
    Mean and sample standard deviation over seeds per configuration hash.
    The deviation is ``nan`` for a single seed.
    """
    groups: dict[str, list[Mapping[str, Any]]] = {}
    for row in rows:
        groups.setdefault(row["config_hash"], []).append(row)
    header = ["config_hash", "seeds"]
    for metric in AGGREGATE_METRICS:
        header.extend([f"{metric}_mean", f"{metric}_std"])
    out_rows = []
    for key in sorted(groups):
        cells = [key, str(len(groups[key]))]
        for metric in AGGREGATE_METRICS:
            values = np.array([float(r[metric]) for r in groups[key]], dtype=np.float64)
            std = float(np.std(values, ddof=1)) if values.size > 1 else math.nan
            cells.extend([format_float(float(np.mean(values))), format_float(std)])
        out_rows.append(cells)
    return _write_rows(path, header, out_rows)


def reference_key(cfg: ExperimentConfig) -> str:
    """
    Cache key of the retain-only reference model: the sections it depends on
    plus the seed.
    """
    data = cfg.to_dict()
    subset = {k: data[k] for k in ("data", "model", "pretrain", "seed")}
    payload = json.dumps(subset, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()
