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
Single-block, single-head toy transformer.

Inputs are ``n x d`` token matrices (one row per position):

- ``A = softmax_rows(X W_Q (X W_K)^T / sqrt(d))``
- ``H1 = X + A X W_V``
- ``H2 = H1 + sigma(H1 W_1^T) W_2^T``
- ``z = W_c mean_rows(H2) + b_c``

Residual connections only; no normalization, masking or positional terms.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from bpu.core_math import Matrix, RngStream, Vector, rng_gaussian_matrix
from bpu.errors import ContractViolation, NumericEvent
from bpu.nnet import Activation, softmax
from bpu.tape import Node, Tape, tape_backward, tape_forward

logger = logging.getLogger(__name__)

# Order in which weights are numbered as layers.
WEIGHT_NAMES: tuple[str, ...] = ("W_Q", "W_K", "W_V", "W_1", "W_2", "W_c")
WEIGHT_COMPONENTS: dict[str, str] = {
    "W_Q": "attention",
    "W_K": "attention",
    "W_V": "attention",
    "W_1": "ffn",
    "W_2": "ffn",
    "W_c": "classifier",
}


@dataclass
class ToyTransformerParams:
    W_Q: Matrix
    W_K: Matrix
    W_V: Matrix
    W_1: Matrix
    W_2: Matrix
    W_c: Matrix
    b_c: Vector
    activation: Activation = Activation.TANH

    def __post_init__(self) -> None:
        d = self.W_Q.shape[0]
        d_ff = self.W_1.shape[0]
        expected = {
            "W_Q": (d, d),
            "W_K": (d, d),
            "W_V": (d, d),
            "W_1": (d_ff, d),
            "W_2": (d, d_ff),
            "W_c": (self.W_c.shape[0], d),
        }
        for name, shape in expected.items():
            if self.weight(name).shape != shape:
                raise ContractViolation(
                    "transformer shapes do not chain", weight=name, expected=shape, got=self.weight(name).shape
                )
        if self.b_c.shape != (self.W_c.shape[0],):
            raise ContractViolation(
                "classifier bias does not match classes", bias=self.b_c.shape, classes=self.W_c.shape[0]
            )

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_ff(self) -> int:
        return self.W_1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W_c.shape[0]

    def weight(self, name: str) -> Matrix:
        if name not in WEIGHT_NAMES:
            raise ContractViolation("unknown transformer weight", name=name, valid=list(WEIGHT_NAMES))
        return getattr(self, name)

    def weights(self) -> dict[str, Matrix]:
        return {name: self.weight(name) for name in WEIGHT_NAMES}

    def copy(self) -> "ToyTransformerParams":
        weights = {n: w.copy() for n, w in self.weights().items()}
        return ToyTransformerParams(**weights, b_c=self.b_c.copy(), activation=self.activation)


@dataclass
class TransformerTrace:
    attention: Matrix
    h1: Matrix
    ffn_pre: Matrix
    h2: Matrix
    pooled: Vector


def init_transformer(
    stream: RngStream,
    d: int,
    d_ff: int,
    num_classes: int,
    activation: Activation = Activation.TANH,
    scale: float = 1.0,
) -> ToyTransformerParams:
    """
    Gaussian init with stddev ``scale / sqrt(fan_in)``, drawn in ``WEIGHT_NAMES`` order.
    """
    shapes = {"W_Q": (d, d), "W_K": (d, d), "W_V": (d, d), "W_1": (d_ff, d), "W_2": (d, d_ff), "W_c": (num_classes, d)}
    weights = {}
    for name in WEIGHT_NAMES:
        rows, cols = shapes[name]
        fan_in = rows if name in ("W_Q", "W_K", "W_V") else cols
        weights[name] = rng_gaussian_matrix(stream, rows, cols, 0.0, scale / math.sqrt(fan_in))
    return ToyTransformerParams(**weights, b_c=np.zeros(num_classes), activation=activation)


def transformer_forward(params: ToyTransformerParams, x: Matrix) -> tuple[TransformerTrace, Vector]:
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != params.d:
        raise ContractViolation("transformer input must be n x d with n >= 1", d=params.d, got=x.shape)
    scores = (x @ params.W_Q) @ (x @ params.W_K).T / math.sqrt(params.d)
    attention = softmax(scores)
    h1 = x + attention @ (x @ params.W_V)
    ffn_pre = h1 @ params.W_1.T
    h2 = h1 + params.activation.apply(ffn_pre) @ params.W_2.T
    pooled = np.mean(h2, axis=0)
    z = params.W_c @ pooled + params.b_c
    if not np.all(np.isfinite(z)):
        raise NumericEvent("non-finite transformer logits", layer=len(WEIGHT_NAMES))
    return TransformerTrace(attention, h1, ffn_pre, h2, pooled), z


def transformer_graph(tape: Tape, weights: Mapping[str, Node], b_c: Node, x: Matrix, activation: Activation) -> Node:
    """
    Records the transformer forward on ``tape`` and returns the 1 x C logits node.

    ``weights`` maps every name in ``WEIGHT_NAMES`` to a node holding that
    weight (a parameter or any expression producing it).
    """
    xs = tape.constant(x)
    d = x.shape[1]
    q = tape.matmul(xs, weights["W_Q"])
    k = tape.matmul(xs, weights["W_K"])
    v = tape.matmul(xs, weights["W_V"])
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(d))
    attention = tape.row_softmax(scores)
    h1 = tape.add(xs, tape.matmul(attention, v))
    ffn_pre = tape.matmul(h1, tape.transpose(weights["W_1"]))
    hidden = tape.elementwise(ffn_pre, activation.apply, activation.derivative)
    ffn = tape.matmul(hidden, tape.transpose(weights["W_2"]))
    h2 = tape.add(h1, ffn)
    pooled = tape.mean_pool(h2)
    return tape.watch(tape.add_bias(tape.matmul(pooled, tape.transpose(weights["W_c"])), b_c), "logits")


def transformer_loss_and_grads(
    params: ToyTransformerParams, inputs: list[Matrix], labels: list[int]
) -> tuple[float, dict[str, Matrix], Matrix]:
    """
    Mean cross-entropy over a batch of token matrices with gradients for every weight.

    Returns ``(loss, grads, logits)`` where ``grads`` is keyed by weight name
    plus ``"b_c"`` (as a vector) and ``logits`` has one row per example.
    """
    if not inputs:
        raise ContractViolation("empty batch")
    logit_nodes: list[Node] = []

    def build(tape: Tape) -> Node:
        weights = {name: tape.parameter(name, params.weight(name)) for name in WEIGHT_NAMES}
        b_c = tape.parameter("b_c", params.b_c)
        total: Node | None = None
        for x, y in zip(inputs, labels, strict=True):
            logits = transformer_graph(tape, weights, b_c, x, params.activation)
            logit_nodes.append(logits)
            loss = tape.cross_entropy(tape.row_softmax(logits), int(y))
            total = loss if total is None else tape.add(total, loss)
        assert total is not None
        return tape.scale(total, 1.0 / len(inputs))

    value, tape = tape_forward(build)
    grads = tape_backward(tape)
    grads["b_c"] = grads["b_c"].reshape(-1)
    logits = np.vstack([n.value for n in logit_nodes])
    if not np.all(np.isfinite(logits)):
        raise NumericEvent("non-finite transformer logits", layer=len(WEIGHT_NAMES))
    return float(value[0, 0]), grads, logits
