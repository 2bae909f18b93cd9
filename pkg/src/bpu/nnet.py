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
MLP forward and backward passes.

Notation follows the usual layer-wise chain rule:

- ``a_0 = x``, ``h_l = W_l a_{l-1} + b_l``, ``a_l = sigma(h_l)`` for ``1 <= l <= L-1``
- ``z = W_L a_{L-1} + b_L``, ``p = softmax(z)``
- ``g_L = p - e_y``, ``g_l = D_l W_{l+1}^T g_{l+1}`` with ``D_l = diag(sigma'(h_l))``
- ``grad W_l = g_l a_{l-1}^T``, ``grad b_l = g_l``

The final layer keeps an explicit bias.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import numpy.typing as npt
from scipy.special import expit, logsumexp

from bpu.core_math import Matrix, RngStream, Vector, rng_gaussian_matrix
from bpu.errors import ContractViolation, NumericEvent

logger = logging.getLogger(__name__)


class Activation(Enum):
    """
    Hidden-layer activation with its derivative.
    """

    TANH = "tanh"
    RELU = "relu"
    SIGMOID = "sigmoid"

    def apply(self, h: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        match self:
            case Activation.TANH:
                return np.tanh(h)
            case Activation.RELU:
                return np.maximum(h, 0.0)
            case Activation.SIGMOID:
                return expit(h)

    def derivative(self, h: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        match self:
            case Activation.TANH:
                t = np.tanh(h)
                return 1.0 - t * t
            case Activation.RELU:
                return (h > 0.0).astype(np.float64)
            case Activation.SIGMOID:
                s = expit(h)
                return s * (1.0 - s)


@dataclass
class MlpParams:
    """
    Layers ``(W_l, b_l)`` for ``l = 1..L``; ``W_l`` is ``d_l x d_{l-1}``.
    """

    weights: list[Matrix]
    biases: list[Vector]
    activation: Activation = Activation.TANH

    def __post_init__(self) -> None:
        if not self.weights:
            raise ContractViolation("an MLP needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise ContractViolation(
                "weights and biases differ in count", weights=len(self.weights), biases=len(self.biases)
            )
        for l, (w, b) in enumerate(zip(self.weights, self.biases, strict=True), start=1):
            if b.shape != (w.shape[0],):
                raise ContractViolation("bias does not match layer width", layer=l, weight=w.shape, bias=b.shape)
            if l > 1 and w.shape[1] != self.weights[l - 2].shape[0]:
                raise ContractViolation(
                    "layer widths do not chain", layer=l, weight=w.shape, previous=self.weights[l - 2].shape
                )

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


@dataclass
class ForwardTrace:
    """
    ``a``: activations ``a_0..a_{L-1}``; ``h``: pre-activations ``h_1..h_{L-1}``.
    """

    a: list[Vector]
    h: list[Vector]
    z: Vector
    p: Vector


@dataclass
class BatchTrace:
    """
    Batched ``ForwardTrace``: each entry holds one row per example.
    """

    a: list[Matrix]
    h: list[Matrix]
    z: Matrix
    p: Matrix

    def example(self, i: int) -> ForwardTrace:
        return ForwardTrace(a=[m[i] for m in self.a], h=[m[i] for m in self.h], z=self.z[i], p=self.p[i])


@dataclass
class GradientSet:
    """
    Per-layer gradients plus the backpropagated vectors ``g_1..g_L``.

    For batched gradients the entries of ``g`` are matrices (one row per
    example) and the weight/bias gradients are batch means.
    """

    weights: list[Matrix]
    biases: list[Vector]
    g: list[npt.NDArray[np.float64]]


def init_mlp(
    stream: RngStream, widths: list[int], activation: Activation = Activation.TANH, scale: float = 1.0
) -> MlpParams:
    """
    Gaussian init with stddev ``scale / sqrt(fan_in)``; zero biases.

    ``widths`` lists ``d_0, d_1, ..., d_L``.
    """
    if len(widths) < 2:
        raise ContractViolation("widths must list input and output sizes", widths=widths)
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:], strict=True):
        weights.append(rng_gaussian_matrix(stream, fan_out, fan_in, 0.0, scale / math.sqrt(fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def softmax(z: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """
    Max-subtracted softmax over the last axis.
    """
    arr = np.asarray(z, dtype=np.float64)
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(p: Vector, y: int) -> float:
    """
    ``-log p_y``. Returns ``inf`` when ``p_y`` underflowed to zero; callers guard it.
    """
    if not 0 <= y < p.shape[0]:
        raise ContractViolation("class index out of range", y=y, classes=p.shape[0])
    py = float(p[y])
    if py <= 0.0:
        logger.debug("zero probability for target class", extra={"y": y})
        return math.inf
    return -math.log(py)


def cross_entropy_from_logits(z: npt.ArrayLike, y: npt.ArrayLike) -> npt.NDArray[np.float64] | float:
    """
    ``logsumexp(z) - z_y``; same value as ``cross_entropy(softmax(z), y)`` without underflow.
    """
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim == 1:
        return float(logsumexp(arr) - arr[int(y)])
    labels = np.asarray(y, dtype=np.int64)
    return logsumexp(arr, axis=1) - arr[np.arange(arr.shape[0]), labels]


def logit_gradient(p: Vector, y: int) -> Vector:
    """``p - e_y``."""
    if not 0 <= y < p.shape[0]:
        raise ContractViolation("class index out of range", y=y, classes=p.shape[0])
    g = np.array(p, dtype=np.float64)
    g[y] -= 1.0
    return g


def margin(z: Vector, y: int) -> float:
    """``max_{j != y} (z_j - z_y)``."""
    if z.shape[0] < 2:
        raise ContractViolation("margin needs at least two classes", classes=z.shape[0])
    others = np.delete(z, y)
    return float(np.max(others) - z[y])


def loss_margin_bounds(z: Vector, y: int) -> tuple[float, float]:
    """
    ``(m, log(1 + (C-1) e^m))``; the cross-entropy at ``z`` lies between them.
    """
    m = margin(z, y)
    classes = z.shape[0]
    upper = float(np.logaddexp(0.0, m + math.log(classes - 1)))
    return m, upper


def _check_finite(values: npt.NDArray[np.float64], layer: int) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericEvent("non-finite activation", layer=layer)


def mlp_forward(params: MlpParams, x: Vector) -> ForwardTrace:
    if x.shape != (params.input_width,):
        raise ContractViolation("input width mismatch", expected=params.input_width, got=x.shape)
    a = [x]
    h = []
    for l in range(1, params.depth):
        pre = params.weights[l - 1] @ a[-1] + params.biases[l - 1]
        _check_finite(pre, l)
        h.append(pre)
        a.append(params.activation.apply(pre))
    z = params.weights[-1] @ a[-1] + params.biases[-1]
    _check_finite(z, params.depth)
    return ForwardTrace(a=a, h=h, z=z, p=softmax(z))


def mlp_backward(params: MlpParams, trace: ForwardTrace, y: int) -> GradientSet:
    depth = params.depth
    g: list[Vector] = [np.empty(0)] * depth
    g[depth - 1] = logit_gradient(trace.p, y)
    for l in range(depth - 1, 0, -1):
        # g_l = D_l W_{l+1}^T g_{l+1}; D_l is diagonal so it is applied elementwise.
        g[l - 1] = params.activation.derivative(trace.h[l - 1]) * (params.weights[l].T @ g[l])
    weights = [np.outer(g[l], trace.a[l]) for l in range(depth)]
    biases = [gl.copy() for gl in g]
    return GradientSet(weights=weights, biases=biases, g=g)


def mlp_forward_batch(params: MlpParams, x: Matrix) -> BatchTrace:
    """
    ``mlp_forward`` over the rows of ``x``.
    """
    if x.ndim != 2 or x.shape[1] != params.input_width:
        raise ContractViolation("input width mismatch", expected=params.input_width, got=x.shape)
    a = [x]
    h = []
    for l in range(1, params.depth):
        pre = a[-1] @ params.weights[l - 1].T + params.biases[l - 1]
        _check_finite(pre, l)
        h.append(pre)
        a.append(params.activation.apply(pre))
    z = a[-1] @ params.weights[-1].T + params.biases[-1]
    _check_finite(z, params.depth)
    return BatchTrace(a=a, h=h, z=z, p=softmax(z))


def mlp_backward_batch(params: MlpParams, trace: BatchTrace, y: npt.ArrayLike) -> GradientSet:
    """
    Mean gradients of the batch cross-entropy; ``g`` keeps per-example rows.
    """
    labels = np.asarray(y, dtype=np.int64)
    n = labels.shape[0]
    depth = params.depth
    g: list[Matrix] = [np.empty(0)] * depth
    top = trace.p.copy()
    top[np.arange(n), labels] -= 1.0
    g[depth - 1] = top
    for l in range(depth - 1, 0, -1):
        g[l - 1] = params.activation.derivative(trace.h[l - 1]) * (g[l] @ params.weights[l])
    weights = [g[l].T @ trace.a[l] / n for l in range(depth)]
    biases = [np.mean(gl, axis=0) for gl in g]
    return GradientSet(weights=weights, biases=biases, g=g)
