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
Experiment configuration schema.

Every section forbids unknown keys and defaults every field, so ``{}`` is a
valid configuration.
"""

import copy
import itertools
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from bpu.adapters import AdapterKind, AdapterVariant
from bpu.errors import ConfigError
from bpu.nnet import Activation

logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class ModelKind(str, Enum):
    MLP = "mlp"
    TRANSFORMER = "transformer"


class DataKind(str, Enum):
    BLOBS = "blobs"
    RANDOM_LABEL = "random_label"


class ObjectiveMode(str, Enum):
    GRADIENT_DIFFERENCE = "gradient_difference"
    PURE_ASCENT = "pure_ascent"
    COMBINED = "combined"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


class GuardMode(str, Enum):
    HALT = "halt"
    RECORD = "record"


class AdamWSettings(StrictModel):
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)


class GuardSettings(StrictModel):
    norm_factor: float = Field(1e3, gt=1.0)
    mode: GuardMode = GuardMode.RECORD


class ModelSection(StrictModel):
    kind: ModelKind = ModelKind.MLP
    hidden_width: int = Field(64, ge=1)
    depth: int = Field(3, ge=1)
    activation: Activation = Activation.TANH
    d_ff: int = Field(32, ge=1)
    seq_len: int = Field(4, ge=1)
    init_scale: float = Field(1.0, gt=0.0)


class AdapterSection(StrictModel):
    kind: AdapterVariant = AdapterVariant.SINE
    rank: int = Field(4, ge=1)
    omega: float = Field(100.0, gt=0.0)
    clip_lo: float = -1.5
    clip_hi: float = 1.5
    targets: list[int | str] | None = None
    full_finetune: bool = False

    @model_validator(mode="after")
    def _clip_order(self) -> Self:
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")
        return self

    def adapter_kind(self) -> AdapterKind:
        return AdapterKind(self.kind, self.omega, self.clip_lo, self.clip_hi)

    def resolved_targets(self, model: ModelSection) -> list[int | str]:
        if self.targets is not None:
            return list(self.targets)
        if model.kind is ModelKind.MLP:
            # Hidden layers only; the classifier head stays frozen.
            return list(range(1, model.depth)) or [1]
        return ["W_V", "W_1", "W_2"]


class DataSection(StrictModel):
    kind: DataKind = DataKind.RANDOM_LABEL
    n: int = Field(512, ge=1)
    num_classes: int = Field(8, ge=2)
    dim: int = Field(16, ge=1)
    noise: float = Field(1.0, gt=0.0)
    forget_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    holdout_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _fractions(self) -> Self:
        if self.forget_fraction + self.holdout_fraction >= 1.0:
            raise ValueError("forget_fraction + holdout_fraction must be below 1")
        return self


class PretrainSection(StrictModel):
    iterations: int = Field(2000, ge=0)
    learning_rate: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(32, ge=1)
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    adamw: AdamWSettings = AdamWSettings(weight_decay=0.0)


class TrainSection(StrictModel):
    alpha_r: float = Field(1.0, ge=0.0)
    alpha_f: float = Field(1.0, ge=0.0)
    lam: float = Field(1.0, gt=0.0, alias="lambda")
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    adamw: AdamWSettings = AdamWSettings()
    learning_rate: float = Field(5e-5, gt=0.0)
    batch_size: int = Field(8, ge=1)
    iterations: int = Field(3000, ge=0)
    grad_accumulation: int = Field(4, ge=1)
    objective_mode: ObjectiveMode = ObjectiveMode.GRADIENT_DIFFERENCE


class TrainConfig(TrainSection):
    """
    Everything an unlearning session needs: the train section plus the
    session seed and the divergence guard.
    """

    seed: int = 0
    guard: GuardSettings = GuardSettings()


class DiagnosticsSection(StrictModel):
    theorem_checks: bool = False
    check_every: int = Field(10, ge=1)
    theorem_layer: int = Field(1, ge=1)
    guard: GuardSettings = GuardSettings()
    explosion_factor: float = Field(50.0, gt=1.0)
    explosion_window: int = Field(5, ge=1)
    check_bounds: bool = True


class OutputSection(StrictModel):
    directory: str | None = None
    emit_norms: bool = True
    snapshot: bool = True


class SweepSection(StrictModel):
    grid: dict[str, list[Any]] = {}
    seeds: list[int] = []
    jobs: int = Field(1, ge=1)


class GradcheckSection(StrictModel):
    mlp_cases: int = Field(100, ge=1)
    adapter_cases: int = Field(100, ge=1)
    tape_cases: int = Field(50, ge=1)
    transformer_cases: int = Field(20, ge=1)
    step: float = Field(1e-6, gt=0.0)


class ExperimentConfig(StrictModel):
    seed: int = Field(0, ge=0, lt=2**64)
    model: ModelSection = ModelSection()
    adapter: AdapterSection = AdapterSection()
    data: DataSection = DataSection()
    pretrain: PretrainSection = PretrainSection()
    train: TrainSection = TrainSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()
    output: OutputSection = OutputSection()
    sweep: SweepSection = SweepSection()
    gradcheck: GradcheckSection = GradcheckSection()

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump(), seed=self.seed, guard=self.diagnostics.guard)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": seed})

    def to_dict(self) -> dict[str, Any]:
        """JSON-compatible form; enum values as strings, ``lambda`` under its alias."""
        return self.model_dump(mode="json", by_alias=True)


def _violations(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def config_from_dict(data: Any) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object", got=type(data).__name__)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError("invalid configuration", _violations(exc)) from exc


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    return config_from_dict(data)


def load_config(path: Path | str) -> ExperimentConfig:
    """
    Reads and validates a configuration file.

    Raises ``ConfigError`` for malformed or invalid documents; ``OSError``
    propagates for unreadable files.
    """
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    logger.debug("configuration loaded", extra={"path": str(path)})
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"


def apply_override(data: dict[str, Any], dotted: str, value: Any) -> dict[str, Any]:
    """Copy of ``data`` with ``value`` set at a dotted path such as ``adapter.omega``."""
    out = copy.deepcopy(data)
    node = out
    *parents, leaf = dotted.split(".")
    for key in parents:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError("sweep path crosses a non-section value", violations=[dotted])
        node = child
    node[leaf] = value
    return out


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[ExperimentConfig, int]]:
    """
    Cartesian product of the sweep grid times the sweep seeds.

    Grid keys are visited in sorted order. With no seeds listed the config's
    own seed is used. The ``sweep`` section itself is cleared in every cell.
    """
    base = cfg.to_dict()
    base["sweep"] = SweepSection().model_dump(mode="json")
    keys = sorted(cfg.sweep.grid)
    seeds = cfg.sweep.seeds or [cfg.seed]
    cells = []
    errors: list[str] = []
    for combo in itertools.product(*(cfg.sweep.grid[k] for k in keys)):
        data = base
        for key, value in zip(keys, combo, strict=True):
            data = apply_override(data, key, value)
        for seed in seeds:
            data_seeded = dict(data, seed=seed)
            try:
                cells.append((ExperimentConfig.model_validate(data_seeded), seed))
            except ValidationError as exc:
                errors.extend(f"{dict(zip(keys, combo, strict=True))}: {v}" for v in _violations(exc))
    if errors:
        raise ConfigError("invalid sweep cell", sorted(set(errors)))
    return cells
