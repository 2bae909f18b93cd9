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
Minimal reverse-mode differentiation tape.

Operations are evaluated eagerly while they are recorded, so the recording
order is already a topological order and the backward sweep simply walks it
in reverse. Every value is a 2-D float64 array; vectors are 1 x n rows.

Example
-------
>>> def build(tape):
...     w = tape.parameter("w", weight)
...     x = tape.constant(inputs)
...     z = tape.matmul(x, tape.transpose(w))
...     return tape.cross_entropy(tape.row_softmax(z), label)
>>> loss, tape = tape_forward(build)
>>> grads = tape_backward(tape)
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from bpu.errors import ContractViolation, NumericEvent

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
ElementwiseFn = Callable[[Array], Array]


@dataclass(eq=False)
class Node:
    """
    One recorded value.

    ``backward`` maps the gradient of this node to gradients of ``parents``.
    """

    index: int
    value: Array
    parents: tuple["Node", ...] = ()
    backward: Callable[[Array], tuple[Array, ...]] | None = None
    name: str | None = None
    is_parameter: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    loss: Node | None = None
    watched: dict[str, Node] = field(default_factory=dict)
    gradients: dict[int, Array] = field(default_factory=dict)

    def _record(
        self,
        value: Array,
        parents: tuple[Node, ...] = (),
        backward: Callable[[Array], tuple[Array, ...]] | None = None,
        name: str | None = None,
        is_parameter: bool = False,
    ) -> Node:
        node = Node(len(self.nodes), value, parents, backward, name, is_parameter)
        self.nodes.append(node)
        return node

    # Leaves.

    def parameter(self, name: str, value: npt.ArrayLike) -> Node:
        """Leaf whose gradient ``tape_backward`` reports under ``name``."""
        if any(n.is_parameter and n.name == name for n in self.nodes):
            raise ContractViolation("parameter name already used", name=name)
        return self._record(_as_2d(value).copy(), name=name, is_parameter=True)

    def constant(self, value: npt.ArrayLike) -> Node:
        return self._record(_as_2d(value))

    def watch(self, node: Node, name: str) -> Node:
        """Keep the gradient of an intermediate node available after backward."""
        self.watched[name] = node
        return node

    # Operations.

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ContractViolation("matmul dimension mismatch", left=a.shape, right=b.shape)
        av, bv = a.value, b.value
        return self._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a: Node) -> Node:
        return self._record(a.value.T.copy(), (a,), lambda g: (g.T,))

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ContractViolation("add shape mismatch", left=a.shape, right=b.shape)
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def add_bias(self, a: Node, bias: Node) -> Node:
        """Adds the 1 x n row ``bias`` to every row of ``a``."""
        if bias.shape != (1, a.shape[1]):
            raise ContractViolation("bias must be a single row matching the columns", value=a.shape, bias=bias.shape)
        return self._record(a.value + bias.value, (a, bias), lambda g: (g, np.sum(g, axis=0, keepdims=True)))

    def elementwise(self, a: Node, fn: ElementwiseFn, derivative: ElementwiseFn) -> Node:
        pre = a.value
        return self._record(fn(pre), (a,), lambda g: (g * derivative(pre),))

    def scale(self, a: Node, factor: float) -> Node:
        return self._record(a.value * factor, (a,), lambda g: (g * factor,))

    def row_softmax(self, a: Node) -> Node:
        shifted = a.value - np.max(a.value, axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / np.sum(e, axis=1, keepdims=True)

        def backward(g: Array) -> tuple[Array, ...]:
            return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

        return self._record(p, (a,), backward)

    def cross_entropy(self, p: Node, y: int) -> Node:
        """``-log p[0, y]`` for a 1 x C probability row."""
        if p.shape[0] != 1 or not 0 <= y < p.shape[1]:
            raise ContractViolation("cross_entropy needs a 1 x C row and a valid class", shape=p.shape, y=y)
        py = float(p.value[0, y])
        if py <= 0.0:
            raise NumericEvent("zero probability for target class", y=y)

        def backward(g: Array) -> tuple[Array, ...]:
            grad = np.zeros_like(p.value)
            grad[0, y] = -g[0, 0] / py
            return (grad,)

        return self._record(np.array([[-np.log(py)]]), (p,), backward)

    def mean_pool(self, a: Node) -> Node:
        """Column means as a 1 x n row."""
        rows = a.shape[0]
        return self._record(
            np.mean(a.value, axis=0, keepdims=True),
            (a,),
            lambda g: (np.repeat(g, rows, axis=0) / rows,),
        )

    def gradient(self, node: Node | str) -> Array:
        """Gradient of the loss w.r.t. a node (or watched name) after ``tape_backward``."""
        if isinstance(node, str):
            node = self.watched[node]
        if node.index not in self.gradients:
            return np.zeros_like(node.value)
        return self.gradients[node.index]


def _as_2d(value: npt.ArrayLike) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ContractViolation("tape values must be vectors or matrices", ndim=arr.ndim)
    return arr


def tape_forward(build: Callable[[Tape], Node]) -> tuple[Array, Tape]:
    """
    Records ``build`` on a fresh tape.

    A scalar (1 x 1) result is marked as the loss that ``tape_backward``
    differentiates.
    """
    tape = Tape()
    out = build(tape)
    if out.shape == (1, 1):
        tape.loss = out
    return out.value, tape


def tape_backward(tape: Tape) -> dict[str, Array]:
    """
    Reverse sweep from the recorded loss.

    Returns
    -------
    dict[str, Array]
        Gradient for every parameter, keyed by the parameter's name.
    """
    if tape.loss is None:
        raise ContractViolation("backward called before a loss was recorded")
    grads: dict[int, Array] = {tape.loss.index: np.ones((1, 1))}
    for node in reversed(tape.nodes[: tape.loss.index + 1]):
        g = grads.get(node.index)
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g), strict=True):
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    tape.gradients = grads
    logger.debug("tape backward", extra={"nodes": len(tape.nodes)})
    return {
        n.name: grads.get(n.index, np.zeros_like(n.value)) for n in tape.nodes if n.is_parameter and n.name is not None
    }
