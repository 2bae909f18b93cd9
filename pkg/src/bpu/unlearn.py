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
Gradient-difference unlearning trainer.

Three objectives are supported:

- ``gradient_difference``: descent on the retain loss, ascent on the forget loss
- ``pure_ascent``: ascent on the forget loss only
- ``combined``: descent on ``L_r - lambda L_f``

SGD in ``gradient_difference``/``pure_ascent`` mode steps along
``-alpha_r grad_r + alpha_f grad_f`` scaled by the learning rate. AdamW (and
SGD in combined mode) consume the signed objective gradient at the configured
learning rate.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from bpu.adapters import AdaptedModel, GradientBundle, ObjectiveGrads
from bpu.config import AdamWSettings, GuardMode, ObjectiveMode, OptimizerKind, PretrainSection, TrainConfig
from bpu.core_math import RngStream
from bpu.diagnostics import TraceRecord, record_iteration
from bpu.errors import ContractViolation, DivergenceError, NumericEvent

if TYPE_CHECKING:
    from bpu.evalkit import Dataset

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
ParamSet = Mapping[str, Array]
Batch = tuple[Array, npt.NDArray[np.int64]]

# Substream labels under the session stream.
RETAIN_STREAM = 1
FORGET_STREAM = 2


def _check_shapes(theta: ParamSet, *others: ParamSet) -> None:
    for other in others:
        if other.keys() != theta.keys():
            raise ContractViolation("gradient keys do not match parameters", params=sorted(theta), grads=sorted(other))
        for key, value in other.items():
            if np.shape(value) != np.shape(theta[key]):
                raise ContractViolation(
                    "gradient shape mismatch", name=key, param=np.shape(theta[key]), grad=np.shape(value)
                )


def grad_difference_step(
    theta: ParamSet, grad_r: ParamSet, grad_f: ParamSet, alpha_r: float, alpha_f: float
) -> dict[str, Array]:
    """``theta - alpha_r grad_r + alpha_f grad_f``, entry by entry."""
    _check_shapes(theta, grad_r, grad_f)
    return {k: theta[k] - alpha_r * grad_r[k] + alpha_f * grad_f[k] for k in theta}


def step_direction(grad_r: ParamSet, grad_f: ParamSet, alpha_r: float, alpha_f: float) -> dict[str, Array]:
    """``-alpha_r grad_r + alpha_f grad_f``: the gradient-difference step from the origin."""
    zeros = {k: np.zeros_like(v) for k, v in grad_r.items()}
    return grad_difference_step(zeros, grad_r, grad_f, alpha_r, alpha_f)


def sgd_step(theta: ParamSet, direction: ParamSet, lr: float) -> dict[str, Array]:
    """``theta + lr * direction``; ``direction`` already carries its sign."""
    _check_shapes(theta, direction)
    return {k: theta[k] + lr * direction[k] for k in theta}


@dataclass
class OptState:
    """
    AdamW moments per parameter. Empty (step 0) until the first AdamW step.
    """

    first: dict[str, Array] = field(default_factory=dict)
    second: dict[str, Array] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    theta: ParamSet,
    effective_grad: ParamSet,
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[dict[str, Array], OptState]:
    """
    One AdamW update with bias correction and decoupled weight decay.

    Returns new parameter arrays and a new state; neither input is modified.
    """
    _check_shapes(theta, effective_grad)
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    first: dict[str, Array] = {}
    second: dict[str, Array] = {}
    out: dict[str, Array] = {}
    for key, value in theta.items():
        g = effective_grad[key]
        m = beta1 * state.first.get(key, np.zeros_like(value)) + (1.0 - beta1) * g
        v = beta2 * state.second.get(key, np.zeros_like(value)) + (1.0 - beta2) * g * g
        first[key], second[key] = m, v
        decayed = value * (1.0 - lr * weight_decay)
        out[key] = decayed - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return out, OptState(first, second, step)


def _combine(grad_r: ParamSet | None, grad_f: ParamSet | None, coef_r: float, coef_f: float) -> dict[str, Array]:
    keys = grad_r.keys() if grad_r is not None else grad_f.keys() if grad_f is not None else ()
    out = {}
    for key in keys:
        total = np.zeros_like(grad_r[key] if grad_r is not None else grad_f[key])  # type: ignore[index]
        if grad_r is not None and coef_r != 0.0:
            total = total + coef_r * grad_r[key]
        if grad_f is not None and coef_f != 0.0:
            total = total + coef_f * grad_f[key]
        out[key] = total
    return out


def objective_coefficients(mode: ObjectiveMode, alpha_r: float, alpha_f: float, lam: float) -> tuple[float, float]:
    """
    Coefficients ``(c_r, c_f)`` of the objective gradient ``c_r grad_r + c_f grad_f``.
    """
    match mode:
        case ObjectiveMode.GRADIENT_DIFFERENCE:
            alpha = alpha_r if alpha_r > 0.0 else alpha_f
            if alpha == 0.0:
                return 0.0, 0.0
            return alpha_r / alpha, -alpha_f / alpha
        case ObjectiveMode.PURE_ASCENT:
            return 0.0, -1.0
        case ObjectiveMode.COMBINED:
            return 1.0, -lam


def objective_gradient(
    grad_r: ParamSet | None,
    grad_f: ParamSet | None,
    mode: ObjectiveMode,
    alpha_r: float = 1.0,
    alpha_f: float = 1.0,
    lam: float = 1.0,
) -> dict[str, Array]:
    coef_r, coef_f = objective_coefficients(mode, alpha_r, alpha_f, lam)
    return _combine(grad_r, grad_f, coef_r, coef_f)


def compute_objective_grads(
    model: AdaptedModel,
    retain_batch: Batch | None,
    forget_batch: Batch | None,
    mode: ObjectiveMode,
    lam: float = 1.0,
    *,
    alpha_r: float = 1.0,
    alpha_f: float = 1.0,
) -> ObjectiveGrads:
    """
    Mean cross-entropy gradients over each batch and the signed objective gradient.

    ``pure_ascent`` needs only the forget batch; a retain batch, when given,
    is evaluated for its loss but does not enter the objective.
    """
    needs_retain = mode is not ObjectiveMode.PURE_ASCENT
    if forget_batch is None or len(forget_batch[1]) == 0:
        raise ContractViolation("objective needs a non-empty forget batch", mode=mode.value)
    if needs_retain and (retain_batch is None or len(retain_batch[1]) == 0):
        raise ContractViolation("objective needs a non-empty retain batch", mode=mode.value)

    retain = model.loss_and_grads(*retain_batch) if retain_batch is not None and len(retain_batch[1]) else None
    forget = model.loss_and_grads(*forget_batch)
    coef_r, coef_f = objective_coefficients(mode, alpha_r, alpha_f, lam)
    if not needs_retain:
        coef_r = 0.0
    r_params = retain.params if retain is not None else None
    r_weights = retain.weights if retain is not None else None
    return ObjectiveGrads(
        retain=retain,
        forget=forget,
        params=_combine(r_params, forget.params, coef_r, coef_f),
        weights=_combine(r_weights, forget.weights, coef_r, coef_f),
    )


def _average(grads: list[ObjectiveGrads]) -> ObjectiveGrads:
    if len(grads) == 1:
        return grads[0]
    n = float(len(grads))

    def mean_of(dicts: list[dict[str, Array]]) -> dict[str, Array]:
        return {k: sum(d[k] for d in dicts) / n for k in dicts[0]}

    def mean_bundle(bundles: list[GradientBundle | None]) -> GradientBundle | None:
        if bundles[0] is None:
            return None
        present = [b for b in bundles if b is not None]
        return GradientBundle(
            loss=float(np.mean([b.loss for b in present])),
            params=mean_of([b.params for b in present]),
            weights=mean_of([b.weights for b in present]),
            logits=np.vstack([b.logits for b in present]),
            per_example_loss=np.concatenate([b.per_example_loss for b in present]),
            labels=np.concatenate([b.labels for b in present]),
            trace=present[0].trace,
        )

    return ObjectiveGrads(
        retain=mean_bundle([g.retain for g in grads]),
        forget=mean_bundle([g.forget for g in grads]),
        params=mean_of([g.params for g in grads]),
        weights=mean_of([g.weights for g in grads]),
    )


class Outcome(Enum):
    COMPLETED = "completed"
    GUARD_HALT = "guard_halt"
    NUMERIC = "numeric"


@dataclass
class DivergenceGuard:
    """
    Fires when the objective-gradient norm exceeds ``norm_factor`` times its
    first positive finite value, or when any non-finite norm appears.
    """

    norm_factor: float
    baseline: float | None = None
    events: list[int] = field(default_factory=list)

    def check(self, iteration: int, norm: float) -> bool:
        if not math.isfinite(norm):
            fired = True
        elif self.baseline is None:
            if norm > 0.0:
                self.baseline = norm
            fired = False
        else:
            fired = norm > self.norm_factor * self.baseline
        if fired:
            if not self.events:
                logger.warning(
                    "divergence guard fired", extra={"iteration": iteration, "norm": norm, "baseline": self.baseline}
                )
            self.events.append(iteration)
        return fired


@dataclass
class SessionResult:
    model: AdaptedModel
    history: list[TraceRecord]
    outcome: Outcome
    stopped_at: int | None = None
    guard_events: list[int] = field(default_factory=list)
    bound_violations: int = 0

    @property
    def diverged(self) -> bool:
        return self.outcome is not Outcome.COMPLETED


@dataclass
class UnlearnSession:
    model: AdaptedModel
    retain: "Dataset"
    forget: "Dataset"
    config: TrainConfig
    rng: RngStream
    opt_state: OptState = field(default_factory=OptState)
    history: list[TraceRecord] = field(default_factory=list)
    check_every: int = 10
    theorem_layer: int | None = None
    check_bounds: bool = True


def sample_batch(stream: RngStream, data: "Dataset", batch_size: int) -> Batch:
    """Draws ``batch_size`` examples with replacement."""
    idx = [stream.randbelow(len(data)) for _ in range(batch_size)]
    return data.inputs[idx], data.labels[idx]


def _optimizer_update(session: UnlearnSession, grads: ObjectiveGrads) -> dict[str, Array]:
    cfg = session.config
    theta = session.model.parameters()
    if cfg.optimizer is OptimizerKind.ADAMW:
        new, session.opt_state = adamw_step(
            theta, grads.params, session.opt_state, cfg.learning_rate, **cfg.adamw.model_dump()
        )
        return new
    if cfg.objective_mode is ObjectiveMode.COMBINED:
        return sgd_step(theta, {k: -g for k, g in grads.params.items()}, cfg.learning_rate)
    zeros = {k: np.zeros_like(v) for k, v in theta.items()}
    grad_r = grads.retain.params if grads.retain is not None else zeros
    grad_f = grads.forget.params if grads.forget is not None else zeros
    alpha_r = 0.0 if cfg.objective_mode is ObjectiveMode.PURE_ASCENT else cfg.alpha_r
    return sgd_step(theta, step_direction(grad_r, grad_f, alpha_r, cfg.alpha_f), cfg.learning_rate)


def run_unlearning(session: UnlearnSession) -> SessionResult:
    """
    Runs the configured number of iterations.

    Each iteration samples batches, computes gradients, evaluates the guard,
    records a trace and then steps. Halt-mode guard firing and numeric
    events stop the run early; the returned result says which.
    """
    cfg = session.config
    model = session.model
    retain_stream = session.rng.spawn(RETAIN_STREAM)
    forget_stream = session.rng.spawn(FORGET_STREAM)
    guard = DivergenceGuard(cfg.guard.norm_factor)
    frozen = {k: w.copy() for k, w in model.base_weights().items()}
    bound_violations = 0
    outcome = Outcome.COMPLETED
    stopped_at: int | None = None

    logger.info(
        "unlearning started",
        extra={"iterations": cfg.iterations, "mode": cfg.objective_mode.value, "optimizer": cfg.optimizer.value},
    )
    for it in range(1, cfg.iterations + 1):
        try:
            parts = []
            for _ in range(cfg.grad_accumulation):
                retain_batch = None
                if len(session.retain):
                    retain_batch = sample_batch(retain_stream, session.retain, cfg.batch_size)
                forget_batch = sample_batch(forget_stream, session.forget, cfg.batch_size)
                parts.append(
                    compute_objective_grads(
                        model,
                        retain_batch,
                        forget_batch,
                        cfg.objective_mode,
                        cfg.lam,
                        alpha_r=cfg.alpha_r,
                        alpha_f=cfg.alpha_f,
                    )
                )
            grads = _average(parts)
            fired = guard.check(it, grads.total_norm)
            theorem_layer = session.theorem_layer if (it - 1) % session.check_every == 0 else None
            record = record_iteration(model, grads, it, fired, theorem_layer=theorem_layer)
            session.history.append(record)
            if record.nonfinite:
                raise NumericEvent("non-finite trace values", iteration=it)
            if fired and cfg.guard.mode is GuardMode.HALT:
                outcome, stopped_at = Outcome.GUARD_HALT, it
                logger.warning("run halted by guard", extra={"iteration": it})
                break
            new = _optimizer_update(session, grads)
            if not all(np.all(np.isfinite(v)) for v in new.values()):
                raise NumericEvent("non-finite parameters after step", iteration=it)
            model.set_parameters(new)
        except NumericEvent as exc:
            outcome, stopped_at = Outcome.NUMERIC, it
            logger.warning("numeric event", extra={"iteration": it, "detail": str(exc)})
            break
        if session.check_bounds:
            bound_violations += model.bound_violations()

    for name, w0 in frozen.items():
        if not np.array_equal(w0, model.base_weights()[name]):
            raise ContractViolation("frozen base weight changed during training", layer=name)
    logger.info(
        "unlearning finished",
        extra={"outcome": outcome.value, "iterations": len(session.history), "guard_events": len(guard.events)},
    )
    return SessionResult(model, session.history, outcome, stopped_at, list(guard.events), bound_violations)


def pretrain(model: AdaptedModel, data: "Dataset", section: PretrainSection, stream: RngStream) -> list[float]:
    """
    Plain supervised training on ``data`` (batches drawn with replacement).

    Returns the per-iteration batch losses. Raises ``DivergenceError`` on any
    non-finite loss or parameter.
    """
    if len(data) == 0:
        raise ContractViolation("pretraining needs a non-empty dataset")
    state = OptState()
    losses: list[float] = []
    settings: AdamWSettings = section.adamw
    for it in range(1, section.iterations + 1):
        try:
            bundle = model.loss_and_grads(*sample_batch(stream, data, section.batch_size))
        except NumericEvent as exc:
            raise DivergenceError("pretraining produced non-finite values", iteration=it) from exc
        if not math.isfinite(bundle.loss):
            raise DivergenceError("pretraining loss is not finite", iteration=it)
        theta = model.parameters()
        if section.optimizer is OptimizerKind.ADAMW:
            new, state = adamw_step(theta, bundle.params, state, section.learning_rate, **settings.model_dump())
        else:
            new = sgd_step(theta, {k: -g for k, g in bundle.params.items()}, section.learning_rate)
        if not all(np.all(np.isfinite(v)) for v in new.values()):
            raise DivergenceError("pretraining parameters are not finite", iteration=it)
        model.set_parameters(new)
        losses.append(bundle.loss)
    final_loss = losses[-1] if losses else None
    logger.debug("pretraining finished", extra={"iterations": section.iterations, "final_loss": final_loss})
    return losses
