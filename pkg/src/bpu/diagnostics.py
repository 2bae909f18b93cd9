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
Per-iteration instrumentation of unlearning runs.

Every traced norm is a Frobenius norm. Operator norms and singular values
appear only in the assumption checks on small diagnostic MLPs.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from bpu.adapters import AdaptedMlp, AdaptedModel, ObjectiveGrads, adapter_norms
from bpu.core_math import SVD_SIZE_CAP, Matrix, Vector, frobenius_norm, project_onto, svd_small
from bpu.errors import ContractViolation
from bpu.nnet import (
    ForwardTrace,
    MlpParams,
    cross_entropy,
    cross_entropy_from_logits,
    logit_gradient,
    loss_margin_bounds,
)

logger = logging.getLogger(__name__)

METRICS: tuple[str, ...] = ("adapter_fro", "adapter_grad_fro", "grad_fro", "weight_fro")
SCALARS: tuple[str, ...] = ("loss_retain", "loss_forget", "logit_norm_mean", "margin_mean")
MARGIN_SLACK = 1e-12


@dataclass(frozen=True, order=True)
class NormEntry:
    layer_id: int
    component: str
    metric: str
    value: float = field(compare=False)
    layer_name: str = field(default="", compare=False)


@dataclass(frozen=True)
class AssumptionReport:
    layer: int
    sigma_min_chain: float
    v1_projection_ratio: float
    a_prev_norm: float


@dataclass
class TraceRecord:
    """
    Snapshot of one unlearning iteration.

    ``norms`` is ordered by (layer id, component, metric). ``nonfinite`` is set
    when any scalar or norm is NaN or infinite.
    """

    iter: int
    loss_retain: float
    loss_forget: float
    logit_norm_mean: float
    margin_mean: float
    norms: tuple[NormEntry, ...] = ()
    guard_flag: bool = False
    assumptions: AssumptionReport | None = None
    margin_violations: int = 0
    nonfinite: bool = field(init=False)

    def __post_init__(self) -> None:
        self.norms = tuple(sorted(self.norms))
        values = [self.loss_retain, self.loss_forget, self.logit_norm_mean, self.margin_mean]
        values.extend(e.value for e in self.norms)
        self.nonfinite = not all(math.isfinite(v) for v in values)

    def scalar(self, name: str) -> float:
        if name not in SCALARS:
            raise ContractViolation("unknown trace scalar", name=name, valid=list(SCALARS))
        return float(getattr(self, name))

    def norm(self, layer_id: int, metric: str) -> float:
        for entry in self.norms:
            if entry.layer_id == layer_id and entry.metric == metric:
                return entry.value
        raise ContractViolation("norm entry not recorded", layer_id=layer_id, metric=metric)

    @property
    def components(self) -> set[str]:
        return {e.component for e in self.norms}


def _margin_check(z: Vector, y: int, loss: float) -> tuple[bool, float, float, float]:
    lower, upper = loss_margin_bounds(z, y)
    holds = lower - MARGIN_SLACK <= loss <= upper + MARGIN_SLACK
    return holds, lower, loss, upper


def check_margin_bound(trace: ForwardTrace, y: int) -> tuple[bool, float, float, float]:
    """
    ``(holds, lower, actual, upper)`` for the loss at ``trace``.
    """
    actual = cross_entropy(trace.p, y)
    if not math.isfinite(actual):
        # p_y underflowed; the logit form stays exact.
        actual = float(cross_entropy_from_logits(trace.z, y))
    return _margin_check(trace.z, y, actual)


def v1_projection_ratio(grad_z: Vector, w_last: Matrix) -> float:
    """
    ``||Proj_{v1}(grad_z)|| / ||grad_z||`` with ``v1`` the first right singular
    vector of ``w_last^T``. Zero for a zero gradient.
    """
    norm = float(np.linalg.norm(grad_z))
    if norm == 0.0:
        return 0.0
    v1 = svd_small(w_last.T).v[:, 0]
    ratio = float(np.linalg.norm(project_onto(grad_z, v1))) / norm
    return min(max(ratio, 0.0), 1.0)


def chain_matrix(params: MlpParams, trace: ForwardTrace, layer_l: int) -> Matrix:
    """``D_l W_{l+1}^T D_{l+1} ... W_{L-1}^T D_{L-1}`` as an explicit matrix."""
    d = [np.diag(params.activation.derivative(h)) for h in trace.h]
    chain = d[layer_l - 1]
    for j in range(layer_l + 1, params.depth):
        chain = chain @ params.weights[j - 1].T @ d[j - 1]
    return chain


def check_thm2_assumptions(params: MlpParams, trace: ForwardTrace, y: int, layer_l: int) -> AssumptionReport:
    """
    Measures the quantities the gradient-divergence argument assumes at ``layer_l``.

    Parameters
    ----------
    params : MlpParams
        Model whose forward pass produced ``trace``.
    trace : ForwardTrace
        Single-example forward trace.
    y : int
        Target class.
    layer_l : int
        Hidden layer index, ``1 <= layer_l <= L - 1``.

    Returns
    -------
    AssumptionReport
        Smallest singular value of the backward chain, alignment of the logit
        gradient with the top singular direction of the last layer, and
        ``||a_{L-1}||``.
    """
    if not 1 <= layer_l <= params.depth - 1:
        raise ContractViolation("assumption layer out of range", layer=layer_l, depth=params.depth)
    widths = [w.shape[0] for w in params.weights] + [params.input_width]
    if max(widths) > SVD_SIZE_CAP:
        raise ContractViolation("diagnostic model exceeds the SVD size cap", cap=SVD_SIZE_CAP, widest=max(widths))
    chain = chain_matrix(params, trace, layer_l)
    sigma_min = float(svd_small(chain).s[-1])
    ratio = v1_projection_ratio(logit_gradient(trace.p, y), params.weights[-1])
    return AssumptionReport(
        layer=layer_l,
        sigma_min_chain=max(sigma_min, 0.0),
        v1_projection_ratio=ratio,
        a_prev_norm=float(np.linalg.norm(trace.a[-1])),
    )


def record_iteration(
    model: AdaptedModel,
    grads: ObjectiveGrads,
    iteration: int,
    guard_flag: bool = False,
    *,
    emit_norms: bool = True,
    theorem_layer: int | None = None,
) -> TraceRecord:
    """
    Builds the trace record for one iteration.

    Logit norms and margins are averaged over the forget batch. Non-finite
    values are recorded as they are.
    """
    forget = grads.forget
    retain_loss = grads.retain.loss if grads.retain is not None else math.nan
    if forget is None:
        forget_loss = logit_norm = margin_mean = math.nan
        violations = 0
    else:
        forget_loss = forget.loss
        logit_norm = float(np.mean(np.linalg.norm(forget.logits, axis=1)))
        margins = []
        violations = 0
        for z, y, loss in zip(forget.logits, forget.labels, forget.per_example_loss, strict=True):
            holds, lower, _, _ = _margin_check(z, int(y), float(loss))
            margins.append(lower)
            violations += 0 if holds else 1
        margin_mean = float(np.mean(margins))
        if violations:
            logger.warning("margin bound violated", extra={"iteration": iteration, "violations": violations})

    entries: list[NormEntry] = []
    if emit_norms:
        for view in model.layer_views():
            grad_w = grads.weights.get(view.name)
            grad_value = frobenius_norm(grad_w) if grad_w is not None else 0.0
            weight_value = frobenius_norm(view.weight)
            entries.append(NormEntry(view.layer_id, view.component, "weight_fro", weight_value, view.name))
            entries.append(NormEntry(view.layer_id, view.component, "grad_fro", grad_value, view.name))
            if view.adapter is not None:
                upd, upd_grad = adapter_norms(
                    view.adapter, grads.params.get(f"{view.name}.A"), grads.params.get(f"{view.name}.B")
                )
                entries.append(NormEntry(view.layer_id, view.component, "adapter_fro", upd, view.name))
                entries.append(NormEntry(view.layer_id, view.component, "adapter_grad_fro", upd_grad, view.name))

    assumptions = None
    if theorem_layer is not None and isinstance(model, AdaptedMlp) and forget is not None and forget.trace is not None:
        assumptions = check_thm2_assumptions(
            model.effective_params(), forget.trace.example(0), int(forget.labels[0]), theorem_layer
        )

    return TraceRecord(
        iter=iteration,
        loss_retain=retain_loss,
        loss_forget=forget_loss,
        logit_norm_mean=logit_norm,
        margin_mean=margin_mean,
        norms=tuple(entries),
        guard_flag=guard_flag,
        assumptions=assumptions,
        margin_violations=violations,
    )


Selector = Callable[[TraceRecord], float]


def scalar_selector(name: str) -> Selector:
    if name not in SCALARS:
        raise ContractViolation("unknown trace scalar", name=name, valid=list(SCALARS))
    return lambda rec: rec.scalar(name)


def norm_selector(layer_id: int, metric: str) -> Selector:
    return lambda rec: rec.norm(layer_id, metric)


def final_layer_selector(metric: str) -> Selector:
    """Selects ``metric`` on the highest layer id present in each record."""
    return lambda rec: rec.norm(max(e.layer_id for e in rec.norms), metric)


def total_norm_selector(metric: str) -> Selector:
    """Frobenius combination of ``metric`` over every layer."""
    return lambda rec: math.sqrt(sum(e.value * e.value for e in rec.norms if e.metric == metric))


def component_selector(component: str, metric: str = "weight_fro") -> Selector:
    def select(rec: TraceRecord) -> float:
        values = [e.value for e in rec.norms if e.component == component and e.metric == metric]
        if not values:
            raise ContractViolation("component not present in trace", component=component, metric=metric)
        return math.sqrt(sum(v * v for v in values))

    return select


@dataclass(frozen=True)
class ExplosionEvent:
    fired: bool
    first_iter: int | None
    baseline: float
    peak_median: float


def detect_explosion(history: Sequence[TraceRecord], selector: Selector, factor: float, window: int) -> ExplosionEvent:
    """
    First iteration whose trailing ``window``-median exceeds ``factor`` times
    the first record's value. A non-finite value inside a window fires too.
    """
    if not history:
        raise ContractViolation("explosion detection needs a non-empty history")
    if not factor > 1.0 or window < 1:
        raise ContractViolation("explosion detection needs factor > 1 and window >= 1", factor=factor, window=window)
    values = np.array([selector(rec) for rec in history], dtype=np.float64)
    baseline = float(values[0])
    threshold = factor * baseline
    peak = -math.inf
    for i in range(window - 1, values.shape[0]):
        chunk = values[i - window + 1 : i + 1]
        if not np.all(np.isfinite(chunk)):
            return ExplosionEvent(True, history[i].iter, baseline, math.inf)
        med = float(np.median(chunk))
        peak = max(peak, med)
        if med > threshold:
            return ExplosionEvent(True, history[i].iter, baseline, med)
    return ExplosionEvent(False, None, baseline, peak)


def peak_to_running_median(history: Sequence[TraceRecord], selector: Selector, window: int) -> float:
    """
    Largest ratio of a value to the median of the ``window`` values before it.

    1.0 until a full window precedes a record. A non-finite value, or a
    positive value over a zero median, gives ``inf``.
    """
    if window < 1:
        raise ContractViolation("running median needs window >= 1", window=window)
    values = np.array([selector(rec) for rec in history], dtype=np.float64)
    peak = 1.0
    for i in range(window, values.shape[0]):
        if not math.isfinite(values[i]):
            return math.inf
        med = float(np.median(values[i - window : i]))
        if med > 0.0:
            peak = max(peak, float(values[i]) / med)
        elif values[i] > 0.0:
            return math.inf
    return peak


def component_growth_summary(
    history: Sequence[TraceRecord], component: str, window: int = 5, metric: str = "weight_fro"
) -> float:
    """
    Median of the component norm over the final ``window`` records divided by
    its first value.
    """
    if not history:
        raise ContractViolation("growth summary needs a non-empty history")
    select = component_selector(component, metric)
    values = np.array([select(rec) for rec in history], dtype=np.float64)
    initial = float(values[0])
    final = float(np.median(values[-min(window, values.shape[0]) :]))
    if initial == 0.0:
        return 1.0 if final == 0.0 else math.inf
    return final / initial
