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
Finite-difference and cross-engine gradient checks.

Relative error is ``max|a - n| / max(||a||_inf, ||n||_inf, 1e-3)``, the floor
keeping near-zero gradients from inflating the ratio.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from bpu.adapters import AdapterKind, AdapterParams, AdapterVariant, adapter_backward, adapter_forward
from bpu.config import GradcheckSection
from bpu.core_math import Matrix, RngStream, Vector, rng_gaussian_matrix
from bpu.nnet import Activation, MlpParams, cross_entropy_from_logits, init_mlp, mlp_backward, mlp_forward, softmax
from bpu.tape import Node, Tape, tape_backward, tape_forward
from bpu.transformer import (
    WEIGHT_NAMES,
    ToyTransformerParams,
    init_transformer,
    transformer_forward,
    transformer_loss_and_grads,
)

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

RELATIVE_FLOOR = 1e-3
KINK_MARGIN = 1e-3
TOLERANCES: dict[str, float] = {
    "mlp": 1e-5,
    "adapter": 1e-5,
    "tape_equivalence": 1e-10,
    "adapter_tape": 1e-10,
    "transformer": 1e-4,
}


def max_relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), RELATIVE_FLOOR)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale


def central_difference(f: Callable[[Array], float], x: Array, step: float = 1e-6) -> Array:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    grad = np.zeros_like(x, dtype=np.float64)
    point = np.array(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = point[idx]
        point[idx] = orig + step
        up = f(point)
        point[idx] = orig - step
        down = f(point)
        point[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def _random_mlp(stream: RngStream, activation: Activation = Activation.TANH) -> MlpParams:
    widths = [3 + stream.randbelow(3), 3 + stream.randbelow(4), 3 + stream.randbelow(4), 2 + stream.randbelow(3)]
    params = init_mlp(stream, widths, activation)
    for b in params.biases:
        b[:] = stream.gaussian_vector(b.shape[0], 0.0, 0.1)
    return params


def mlp_loss(params: MlpParams, x: Vector, y: int) -> float:
    return float(cross_entropy_from_logits(mlp_forward(params, x).z, y))


def mlp_gradcheck_case(params: MlpParams, x: Vector, y: int, step: float) -> float:
    grads = mlp_backward(params, mlp_forward(params, x), y)
    worst = 0.0
    for l in range(params.depth):
        for target, analytic in ((params.weights[l], grads.weights[l]), (params.biases[l], grads.biases[l])):
            saved = target.copy()

            def loss_at(value: Array, target: Array = target) -> float:
                target[...] = value
                return mlp_loss(params, x, y)

            numeric = central_difference(loss_at, saved, step)
            target[...] = saved
            worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def mlp_suite(cases: int, step: float, stream: RngStream) -> float:
    worst = 0.0
    for _ in range(cases):
        params = _random_mlp(stream)
        x = stream.gaussian_vector(params.input_width)
        y = stream.randbelow(params.num_classes)
        worst = max(worst, mlp_gradcheck_case(params, x, y, step))
    return worst


def mlp_graph(tape: Tape, params: MlpParams, x: Vector, y: int) -> Node:
    """Records the MLP loss on ``tape`` with parameters ``W1, b1, ...``."""
    a = tape.constant(x)
    for l, (w, b) in enumerate(zip(params.weights, params.biases, strict=True), start=1):
        h = tape.add_bias(tape.matmul(a, tape.transpose(tape.parameter(f"W{l}", w))), tape.parameter(f"b{l}", b))
        a = h if l == params.depth else tape.elementwise(h, params.activation.apply, params.activation.derivative)
    return tape.cross_entropy(tape.row_softmax(tape.watch(a, "logits")), y)


def tape_equivalence_case(params: MlpParams, x: Vector, y: int) -> float:
    """Max absolute difference between closed-form and tape gradients."""
    closed = mlp_backward(params, mlp_forward(params, x), y)
    _, tape = tape_forward(lambda t: mlp_graph(t, params, x, y))
    taped = tape_backward(tape)
    worst = 0.0
    for l in range(params.depth):
        worst = max(worst, float(np.max(np.abs(closed.weights[l] - taped[f"W{l + 1}"]))))
        worst = max(worst, float(np.max(np.abs(closed.biases[l] - taped[f"b{l + 1}"].reshape(-1)))))
    return worst


def tape_suite(cases: int, stream: RngStream) -> float:
    worst = 0.0
    activations = list(Activation)
    for i in range(cases):
        params = _random_mlp(stream, activations[i % len(activations)])
        x = stream.gaussian_vector(params.input_width)
        worst = max(worst, tape_equivalence_case(params, x, stream.randbelow(params.num_classes)))
    return worst


def adapter_loss(ap: AdapterParams, x: Vector, y: int) -> float:
    return float(cross_entropy_from_logits(adapter_forward(ap, x), y))


def _kind_for(variant: AdapterVariant) -> AdapterKind:
    return AdapterKind(variant, omega=100.0 if variant is AdapterVariant.SINE else 1.0)


def random_adapter_case(stream: RngStream, variant: AdapterVariant) -> tuple[AdapterParams, Vector, int]:
    """
    Random adapter, input and label. Clip and ReLU cases are redrawn until
    every entry of ``A B^T`` is at least ``KINK_MARGIN`` from a kink.
    """
    kind = _kind_for(variant)
    out, in_, r = 3 + stream.randbelow(3), 3 + stream.randbelow(3), 1 + stream.randbelow(2)
    factor_std = 0.05 if variant is AdapterVariant.SINE else 0.8
    while True:
        a = rng_gaussian_matrix(stream, out, r, 0.0, factor_std)
        b = rng_gaussian_matrix(stream, in_, r, 0.0, factor_std)
        m = a @ b.T
        kinks = {AdapterVariant.CLIP: (kind.lo, kind.hi), AdapterVariant.RELU: (0.0,)}.get(variant, ())
        if all(np.min(np.abs(m - k)) >= KINK_MARGIN for k in kinks):
            break
    ap = AdapterParams(
        a=a,
        b=b,
        kind=kind,
        w0=rng_gaussian_matrix(stream, out, in_, 0.0, 0.5),
        bias=stream.gaussian_vector(out, 0.0, 0.1),
    )
    return ap, stream.gaussian_vector(in_), stream.randbelow(out)


def adapter_gradcheck_case(ap: AdapterParams, x: Vector, y: int, step: float) -> float:
    g_h = softmax(adapter_forward(ap, x))
    g_h[y] -= 1.0
    grad_a, grad_b, grad_bias = adapter_backward(ap, x, g_h)
    worst = 0.0
    for attr, analytic in (("a", grad_a), ("b", grad_b), ("bias", grad_bias)):
        saved = getattr(ap, attr).copy()

        def loss_at(value: Array, attr: str = attr) -> float:
            setattr(ap, attr, value)
            return adapter_loss(ap, x, y)

        numeric = central_difference(loss_at, saved, step)
        setattr(ap, attr, saved)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def adapter_graph(tape: Tape, ap: AdapterParams, x: Vector, y: int) -> Node:
    """Adapter layer loss with ``A``, ``B`` and the bias as tape parameters."""
    a = tape.parameter("A", ap.a)
    b = tape.parameter("B", ap.b)
    update = tape.elementwise(tape.matmul(a, tape.transpose(b)), ap.kind.phi, ap.kind.dphi)
    weight = tape.add(tape.constant(ap.w0), update)
    h = tape.add_bias(tape.matmul(tape.constant(x), tape.transpose(weight)), tape.parameter("bias", ap.bias))
    return tape.cross_entropy(tape.row_softmax(h), y)


def adapter_tape_case(ap: AdapterParams, x: Vector, y: int) -> float:
    g_h = softmax(adapter_forward(ap, x))
    g_h[y] -= 1.0
    grad_a, grad_b, grad_bias = adapter_backward(ap, x, g_h)
    _, tape = tape_forward(lambda t: adapter_graph(t, ap, x, y))
    taped = tape_backward(tape)
    return max(
        float(np.max(np.abs(grad_a - taped["A"]))),
        float(np.max(np.abs(grad_b - taped["B"]))),
        float(np.max(np.abs(grad_bias - taped["bias"].reshape(-1)))),
    )


def adapter_suite(cases: int, step: float, stream: RngStream) -> tuple[dict[str, float], float]:
    """Per-variant finite-difference errors and the worst tape disagreement."""
    errors: dict[str, float] = {}
    tape_worst = 0.0
    for variant in AdapterVariant:
        worst = 0.0
        for _ in range(cases):
            ap, x, y = random_adapter_case(stream, variant)
            worst = max(worst, adapter_gradcheck_case(ap, x, y, step))
            tape_worst = max(tape_worst, adapter_tape_case(ap, x, y))
        errors[variant.value] = worst
    return errors, tape_worst


def transformer_loss(params: ToyTransformerParams, x: Matrix, y: int) -> float:
    return float(cross_entropy_from_logits(transformer_forward(params, x)[1], y))


def transformer_gradcheck_case(params: ToyTransformerParams, x: Matrix, y: int, step: float) -> float:
    _, grads, _ = transformer_loss_and_grads(params, [x], [y])
    worst = 0.0
    for name in (*WEIGHT_NAMES, "b_c"):
        target = params.b_c if name == "b_c" else params.weight(name)
        saved = target.copy()

        def loss_at(value: Array, target: Array = target) -> float:
            target[...] = value
            return transformer_loss(params, x, y)

        numeric = central_difference(loss_at, saved, step)
        target[...] = saved
        worst = max(worst, max_relative_error(grads[name], numeric))
    return worst


def transformer_suite(cases: int, step: float, stream: RngStream) -> float:
    worst = 0.0
    for _ in range(cases):
        d, d_ff = 3 + stream.randbelow(2), 4 + stream.randbelow(3)
        classes, n = 2 + stream.randbelow(2), 1 + stream.randbelow(3)
        params = init_transformer(stream, d, d_ff, classes)
        params.b_c[:] = stream.gaussian_vector(classes, 0.0, 0.1)
        x = rng_gaussian_matrix(stream, n, d)
        worst = max(worst, transformer_gradcheck_case(params, x, stream.randbelow(classes), step))
    return worst


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)

    def passed(self, name: str) -> bool:
        tol = TOLERANCES[name.split(".")[0]]
        return math.isfinite(self.errors[name]) and self.errors[name] < tol

    @property
    def ok(self) -> bool:
        return all(self.passed(name) for name in self.errors)

    def to_dict(self) -> dict[str, dict[str, float | bool]]:
        return {
            name: {
                "max_error": self.errors[name],
                "tolerance": TOLERANCES[name.split(".")[0]],
                "passed": self.passed(name),
            }
            for name in sorted(self.errors)
        }


def run_gradcheck(section: GradcheckSection, seed: int) -> GradcheckReport:
    """Runs every suite from independent substreams of ``seed``."""
    root = RngStream(seed)
    report = GradcheckReport()
    report.errors["mlp"] = mlp_suite(section.mlp_cases, section.step, root.spawn(1))
    adapter_errors, adapter_tape = adapter_suite(section.adapter_cases, section.step, root.spawn(2))
    report.errors.update({f"adapter.{k}": v for k, v in adapter_errors.items()})
    report.errors["adapter_tape"] = adapter_tape
    report.errors["tape_equivalence"] = tape_suite(section.tape_cases, root.spawn(3))
    report.errors["transformer"] = transformer_suite(section.transformer_cases, section.step, root.spawn(4))
    for name, err in sorted(report.errors.items()):
        logger.info("gradient check", extra={"suite": name, "max_error": err, "passed": report.passed(name)})
    return report
