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
Low-rank adapters with a bounded elementwise map on the low-rank product.

A targeted layer computes ``h = W0 x + phi(A B^T) x + bias`` with ``A``
(out x r) and ``B`` (in x r) trainable while ``W0`` and ``bias`` stay frozen.
"""

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from bpu.core_math import Matrix, RngStream, Vector, frobenius_norm, rng_gaussian_matrix
from bpu.errors import ContractViolation
from bpu.nnet import BatchTrace, MlpParams, cross_entropy_from_logits, mlp_backward_batch, mlp_forward_batch
from bpu.transformer import (
    WEIGHT_COMPONENTS,
    WEIGHT_NAMES,
    ToyTransformerParams,
    transformer_forward,
    transformer_loss_and_grads,
)

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]


class AdapterVariant(Enum):
    PLAIN = "plain"
    SINE = "sine"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    RELU = "relu"
    CLIP = "clip"


@dataclass(frozen=True)
class AdapterKind:
    """
    Elementwise map applied to ``A B^T``.

    ``omega`` is used by ``sine`` only, ``lo``/``hi`` by ``clip`` only.
    """

    variant: AdapterVariant = AdapterVariant.SINE
    omega: float = 100.0
    lo: float = -1.5
    hi: float = 1.5

    def __post_init__(self) -> None:
        if self.variant is AdapterVariant.SINE and not self.omega > 0.0:
            raise ContractViolation("sine adapters need omega > 0", omega=self.omega)
        if self.variant is AdapterVariant.CLIP and not self.lo < self.hi:
            raise ContractViolation("clip adapters need lo < hi", lo=self.lo, hi=self.hi)

    @classmethod
    def named(cls, name: str, omega: float = 100.0, lo: float = -1.5, hi: float = 1.5) -> "AdapterKind":
        return cls(AdapterVariant(name), omega, lo, hi)

    @property
    def bounds(self) -> tuple[float, float] | None:
        """Range of the map, or ``None`` for unbounded variants."""
        match self.variant:
            case AdapterVariant.SINE | AdapterVariant.TANH:
                return -1.0, 1.0
            case AdapterVariant.SIGMOID:
                return 0.0, 1.0
            case AdapterVariant.CLIP:
                return self.lo, self.hi
            case _:
                return None

    def phi(self, m: Array) -> Array:
        match self.variant:
            case AdapterVariant.PLAIN:
                return np.array(m, dtype=np.float64)
            case AdapterVariant.SINE:
                return np.sin(self.omega * m)
            case AdapterVariant.TANH:
                return np.tanh(m)
            case AdapterVariant.SIGMOID:
                return expit(m)
            case AdapterVariant.RELU:
                return np.maximum(m, 0.0)
            case AdapterVariant.CLIP:
                return np.clip(m, self.lo, self.hi)

    def dphi(self, m: Array) -> Array:
        match self.variant:
            case AdapterVariant.PLAIN:
                return np.ones_like(m, dtype=np.float64)
            case AdapterVariant.SINE:
                return self.omega * np.cos(self.omega * m)
            case AdapterVariant.TANH:
                t = np.tanh(m)
                return 1.0 - t * t
            case AdapterVariant.SIGMOID:
                s = expit(m)
                return s * (1.0 - s)
            case AdapterVariant.RELU:
                return (m > 0.0).astype(np.float64)
            case AdapterVariant.CLIP:
                # Zero at and beyond the bounds.
                return ((m > self.lo) & (m < self.hi)).astype(np.float64)


@dataclass
class AdapterParams:
    a: Matrix
    b: Matrix
    kind: AdapterKind
    w0: Matrix
    bias: Vector

    def __post_init__(self) -> None:
        out, in_ = self.w0.shape
        r = self.a.shape[1]
        if self.a.shape != (out, r) or self.b.shape != (in_, r):
            raise ContractViolation(
                "adapter factor shapes do not match the base", a=self.a.shape, b=self.b.shape, w0=self.w0.shape
            )
        if not 1 <= r <= min(out, in_):
            raise ContractViolation("adapter rank out of range", rank=r, out=out, inp=in_)
        if self.bias.shape != (out,):
            raise ContractViolation("adapter bias does not match output width", bias=self.bias.shape, out=out)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    @property
    def trainable_count(self) -> int:
        return self.a.size + self.b.size


def effective_update(ap: AdapterParams) -> Matrix:
    """``phi(A B^T)``, the matrix added to the frozen base."""
    return ap.kind.phi(ap.a @ ap.b.T)


def adapter_forward(ap: AdapterParams, x: Vector) -> Vector:
    if x.shape != (ap.shape[1],):
        raise ContractViolation("adapter input width mismatch", expected=ap.shape[1], got=x.shape)
    return ap.w0 @ x + effective_update(ap) @ x + ap.bias


def adapter_grads_from_update_grad(ap: AdapterParams, g_update: Matrix) -> tuple[Matrix, Matrix]:
    """
    Chain rule from ``dL/d phi(A B^T)`` to the factors.

    With ``P = G * phi'(A B^T)``: ``grad A = P B`` and ``grad B = P^T A``.
    """
    p = g_update * ap.kind.dphi(ap.a @ ap.b.T)
    return p @ ap.b, p.T @ ap.a


def adapter_backward(ap: AdapterParams, x: Vector, g_h: Vector) -> tuple[Matrix, Matrix, Vector]:
    """
    Gradients of the loss w.r.t. ``A``, ``B`` and the bias, given ``g_h = dL/dh``.
    """
    grad_a, grad_b = adapter_grads_from_update_grad(ap, np.outer(g_h, x))
    return grad_a, grad_b, np.array(g_h, dtype=np.float64)


def init_adapter(
    stream: RngStream,
    kind: AdapterKind,
    out: int,
    in_: int,
    r: int,
    w0: Matrix | None = None,
    bias: Vector | None = None,
) -> AdapterParams:
    """
    ``A ~ N(0, 1/r)`` drawn row-major from ``stream``; ``B = 0``.

    The effective update starts at ``phi(0)``, which is zero for every
    variant except sigmoid.
    """
    if r < 1:
        raise ContractViolation("adapter rank must be at least 1", rank=r)
    a = rng_gaussian_matrix(stream, out, r, 0.0, 1.0 / math.sqrt(r))
    return AdapterParams(
        a=a,
        b=np.zeros((in_, r)),
        kind=kind,
        w0=np.zeros((out, in_)) if w0 is None else w0.copy(),
        bias=np.zeros(out) if bias is None else bias.copy(),
    )


@dataclass
class LayerView:
    """
    One weight matrix as seen by diagnostics.
    """

    layer_id: int
    name: str
    component: str
    weight: Matrix
    adapter: AdapterParams | None = None


@dataclass
class GradientBundle:
    """
    Mean batch loss with gradients for trainable parameters and for every
    effective weight (keyed by layer name).
    """

    loss: float
    params: dict[str, Array]
    weights: dict[str, Matrix]
    logits: Matrix
    per_example_loss: Vector
    labels: npt.NDArray[np.int64]
    trace: BatchTrace | None = None


@dataclass
class ObjectiveGrads:
    """
    Retain and forget bundles plus the signed objective gradient built from them.

    ``params`` and ``weights`` hold the objective gradient w.r.t. trainable
    parameters and effective weights respectively.
    """

    retain: GradientBundle | None
    forget: GradientBundle | None
    params: dict[str, Array]
    weights: dict[str, Matrix]

    @property
    def total_norm(self) -> float:
        """Frobenius norm over every trainable-parameter gradient."""
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.params.values()))


@dataclass
class AdaptedModel(ABC):
    """
    A frozen base model with adapters on some layers.

    In full fine-tune mode every untargeted weight (and its bias) is trainable
    as a raw parameter instead of frozen.
    """

    adapters: dict[str, AdapterParams]
    full_finetune: bool = False
    raw: dict[str, Array] = field(default_factory=dict)

    @property
    @abstractmethod
    def layer_names(self) -> tuple[str, ...]: ...

    @abstractmethod
    def layer_component(self, name: str) -> str: ...

    @abstractmethod
    def base_weights(self) -> dict[str, Matrix]:
        """Frozen base weights keyed by layer name."""

    @abstractmethod
    def current_weight(self, name: str) -> Matrix:
        """Weight currently used for layer ``name`` before any adapter."""

    @abstractmethod
    def loss_and_grads(self, x: Array, y: npt.ArrayLike) -> GradientBundle: ...

    @abstractmethod
    def predict_logits(self, x: Array) -> Matrix: ...

    @property
    def num_classes(self) -> int:
        return self.current_weight(self.layer_names[-1]).shape[0]

    def effective_weight(self, name: str) -> Matrix:
        ap = self.adapters.get(name)
        if ap is None:
            return self.current_weight(name)
        return ap.w0 + effective_update(ap)

    def parameters(self) -> dict[str, Array]:
        """
        Trainable arrays keyed by parameter name, in a fixed order.

        Arrays are live views; optimizers build new arrays and hand them back
        through ``set_parameters``.
        """
        out: dict[str, Array] = {}
        for name in self.layer_names:
            ap = self.adapters.get(name)
            if ap is not None:
                out[f"{name}.A"] = ap.a
                out[f"{name}.B"] = ap.b
            for key in (f"{name}.W", f"{name}.b"):
                if key in self.raw:
                    out[key] = self.raw[key]
        return out

    def set_parameters(self, values: Mapping[str, Array]) -> None:
        current = self.parameters()
        for key, value in values.items():
            if key not in current:
                raise ContractViolation("unknown parameter", name=key, valid=sorted(current))
            if np.shape(value) != current[key].shape:
                raise ContractViolation(
                    "parameter shape mismatch", name=key, expected=current[key].shape, got=np.shape(value)
                )
            layer, part = key.rsplit(".", 1)
            arr = np.array(value, dtype=np.float64)
            match part:
                case "A":
                    self.adapters[layer].a = arr
                case "B":
                    self.adapters[layer].b = arr
                case _:
                    self.raw[key] = arr

    def trainable_count(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def layer_views(self) -> list[LayerView]:
        return [
            LayerView(
                layer_id=i,
                name=name,
                component=self.layer_component(name),
                weight=self.effective_weight(name),
                adapter=self.adapters.get(name),
            )
            for i, name in enumerate(self.layer_names, start=1)
        ]

    def per_example_loss(self, x: Array, y: npt.ArrayLike) -> Vector:
        return np.asarray(cross_entropy_from_logits(self.predict_logits(x), y), dtype=np.float64)

    def bound_violations(self) -> int:
        """Entries of bounded effective updates that fall outside the map's range."""
        count = 0
        for ap in self.adapters.values():
            bounds = ap.kind.bounds
            if bounds is None:
                continue
            upd = effective_update(ap)
            count += int(np.count_nonzero((upd < bounds[0]) | (upd > bounds[1]) | ~np.isfinite(upd)))
        return count

    def snapshot(self) -> dict[str, Array]:
        """Every array needed to rebuild the model, keyed for ``np.savez``."""
        out = {f"base.{n}": w for n, w in self.base_weights().items()}
        out.update({f"param.{n}": v for n, v in self.parameters().items()})
        return out

    def _split_grads(self, weight_grads: Mapping[str, Matrix], bias_grads: Mapping[str, Vector]) -> dict[str, Array]:
        grads: dict[str, Array] = {}
        for name in self.layer_names:
            ap = self.adapters.get(name)
            if ap is not None:
                grads[f"{name}.A"], grads[f"{name}.B"] = adapter_grads_from_update_grad(ap, weight_grads[name])
            if f"{name}.W" in self.raw:
                grads[f"{name}.W"] = weight_grads[name]
            if f"{name}.b" in self.raw:
                grads[f"{name}.b"] = bias_grads[name]
        return grads


@dataclass
class AdaptedMlp(AdaptedModel):
    base: MlpParams = field(kw_only=True)

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(f"layer{l}" for l in range(1, self.base.depth + 1))

    def layer_component(self, name: str) -> str:
        return "classifier" if name == self.layer_names[-1] else "ffn"

    def base_weights(self) -> dict[str, Matrix]:
        return dict(zip(self.layer_names, self.base.weights, strict=True))

    def current_weight(self, name: str) -> Matrix:
        return self.raw.get(f"{name}.W", self.base.weights[self.layer_names.index(name)])

    def current_bias(self, name: str) -> Vector:
        return self.raw.get(f"{name}.b", self.base.biases[self.layer_names.index(name)])

    def effective_params(self) -> MlpParams:
        """Plain MLP with adapters folded into the weights."""
        return MlpParams(
            [self.effective_weight(n) for n in self.layer_names],
            [self.current_bias(n).copy() for n in self.layer_names],
            self.base.activation,
        )

    def predict_logits(self, x: Array) -> Matrix:
        return mlp_forward_batch(self.effective_params(), x).z

    def loss_and_grads(self, x: Array, y: npt.ArrayLike) -> GradientBundle:
        labels = np.asarray(y, dtype=np.int64)
        if labels.shape[0] == 0:
            raise ContractViolation("empty batch")
        params = self.effective_params()
        trace = mlp_forward_batch(params, x)
        losses = np.asarray(cross_entropy_from_logits(trace.z, labels), dtype=np.float64)
        gs = mlp_backward_batch(params, trace, labels)
        weight_grads = dict(zip(self.layer_names, gs.weights, strict=True))
        bias_grads = dict(zip(self.layer_names, gs.biases, strict=True))
        return GradientBundle(
            loss=float(np.mean(losses)),
            params=self._split_grads(weight_grads, bias_grads),
            weights=weight_grads,
            logits=trace.z,
            per_example_loss=losses,
            labels=labels,
            trace=trace,
        )


@dataclass
class AdaptedTransformer(AdaptedModel):
    base: ToyTransformerParams = field(kw_only=True)

    @property
    def layer_names(self) -> tuple[str, ...]:
        return WEIGHT_NAMES

    def layer_component(self, name: str) -> str:
        return WEIGHT_COMPONENTS[name]

    def base_weights(self) -> dict[str, Matrix]:
        return self.base.weights()

    def current_weight(self, name: str) -> Matrix:
        return self.raw.get(f"{name}.W", self.base.weight(name))

    def current_bias(self, name: str) -> Vector | None:
        if name != "W_c":
            return None
        return self.raw.get(f"{name}.b", self.base.b_c)

    def effective_params(self) -> ToyTransformerParams:
        bias = self.current_bias("W_c")
        assert bias is not None
        return ToyTransformerParams(
            **{n: self.effective_weight(n) for n in WEIGHT_NAMES},
            b_c=bias.copy(),
            activation=self.base.activation,
        )

    def predict_logits(self, x: Array) -> Matrix:
        params = self.effective_params()
        return np.vstack([transformer_forward(params, xi)[1] for xi in x])

    def loss_and_grads(self, x: Array, y: npt.ArrayLike) -> GradientBundle:
        labels = [int(v) for v in np.asarray(y, dtype=np.int64)]
        if not labels:
            raise ContractViolation("empty batch")
        loss, grads, logits = transformer_loss_and_grads(self.effective_params(), list(x), labels)
        weight_grads = {n: grads[n] for n in WEIGHT_NAMES}
        losses = np.asarray(cross_entropy_from_logits(logits, labels), dtype=np.float64)
        return GradientBundle(
            loss=loss,
            params=self._split_grads(weight_grads, {"W_c": grads["b_c"]}),
            weights=weight_grads,
            logits=logits,
            per_example_loss=losses,
            labels=np.asarray(labels, dtype=np.int64),
        )


# Transformer weights that may carry adapters.
TRANSFORMER_TARGETS: tuple[str, ...] = ("W_V", "W_1", "W_2", "W_c")


def valid_targets(model: MlpParams | ToyTransformerParams) -> tuple[str, ...]:
    if isinstance(model, MlpParams):
        return tuple(f"layer{l}" for l in range(1, model.depth + 1))
    return TRANSFORMER_TARGETS


def _resolve_target(model: MlpParams | ToyTransformerParams, target: int | str) -> str:
    valid = valid_targets(model)
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(model, MlpParams):
            name = f"layer{target}"
        else:
            name = WEIGHT_NAMES[target - 1] if 1 <= target <= len(WEIGHT_NAMES) else str(target)
    else:
        name = str(target)
    if name not in valid:
        raise ContractViolation("unknown adapter target", target=target, valid=list(valid))
    return name


def attach_adapters(
    model: MlpParams | ToyTransformerParams,
    targets: Iterable[int | str],
    kind: AdapterKind,
    r: int,
    stream: RngStream,
    full_finetune: bool = False,
) -> AdaptedMlp | AdaptedTransformer:
    """
    Freezes ``model`` and pairs each targeted weight with an adapter.

    Targets are layer ids (1-based) or layer names. Adapters are initialized
    in layer order from ``stream``. Untargeted weights stay frozen unless
    ``full_finetune`` is set, in which case they (and their biases) become
    raw trainable parameters.
    """
    names = {_resolve_target(model, t) for t in targets}
    base = model.copy()
    if isinstance(base, MlpParams):
        order = tuple(f"layer{l}" for l in range(1, base.depth + 1))
        weights = dict(zip(order, base.weights, strict=True))
        biases: dict[str, Vector] = dict(zip(order, base.biases, strict=True))
    else:
        order = WEIGHT_NAMES
        weights = base.weights()
        biases = {"W_c": base.b_c}

    adapters: dict[str, AdapterParams] = {}
    raw: dict[str, Array] = {}
    for name in order:
        w0 = weights[name]
        bias = biases.get(name, np.zeros(w0.shape[0]))
        if name in names:
            out, in_ = w0.shape
            if r > min(out, in_):
                raise ContractViolation("adapter rank exceeds layer size", layer=name, rank=r, shape=w0.shape)
            adapters[name] = init_adapter(stream, kind, out, in_, r, w0=w0, bias=bias)
        elif full_finetune:
            raw[f"{name}.W"] = w0.copy()
            if name in biases:
                raw[f"{name}.b"] = bias.copy()

    logger.debug(
        "adapters attached",
        extra={"targets": sorted(names), "kind": kind.variant.value, "rank": r, "full_finetune": full_finetune},
    )
    if isinstance(base, MlpParams):
        return AdaptedMlp(adapters=adapters, full_finetune=full_finetune, raw=raw, base=base)
    return AdaptedTransformer(adapters=adapters, full_finetune=full_finetune, raw=raw, base=base)


def adapter_norms(ap: AdapterParams, grad_a: Matrix | None = None, grad_b: Matrix | None = None) -> tuple[float, float]:
    """``(||phi(A B^T)||_F, ||(grad A, grad B)||_F)``; the second is 0 without gradients."""
    upd = frobenius_norm(effective_update(ap))
    if grad_a is None or grad_b is None:
        return upd, 0.0
    return upd, math.hypot(frobenius_norm(grad_a), frobenius_norm(grad_b))
