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
Closed-form cost model for a sine-bounded low-rank adapter on a ``k x d`` weight.

Counts are exact leading terms with unit constants:

- base product ``W0 x``: ``d k``
- low-rank factors: ``d r + k r``
- elementwise sine over the ``k x d`` update: ``k d`` (independent of ``r``)
- extra backward work: ``k d (1 + r)``
"""

import logging
import time
from dataclasses import dataclass

from bpu.adapters import AdapterKind, adapter_forward, init_adapter
from bpu.core_math import RngStream
from bpu.errors import ContractViolation

logger = logging.getLogger(__name__)

DEFAULT_RANKS: tuple[int, ...] = (4, 8, 16, 32)


def _check_positive(**values: int) -> None:
    for name, value in values.items():
        if int(value) != value or value < 1:
            raise ContractViolation("cost model arguments must be positive integers", **{name: value})


@dataclass(frozen=True)
class CostBreakdown:
    d: int
    k: int
    r: int
    base_ops: int
    lowrank_ops: int
    sine_ops: int
    total_forward_ops: int
    backward_extra_ops: int
    param_count: int
    overhead_ratio: float
    attention_ratio: float | None = None


def lora_param_count(d: int, k: int, r: int) -> int:
    _check_positive(d=d, k=k, r=r)
    return (d + k) * r


def backward_extra_cost(d: int, k: int, r: int) -> int:
    _check_positive(d=d, k=k, r=r)
    return k * d * (1 + r)


def overhead_ratio(d: int, k: int, r: int) -> float:
    """Sine work over low-rank work, ``k d / ((d + k) r)``."""
    _check_positive(d=d, k=k, r=r)
    return (k * d) / ((d + k) * r)


def attention_ratio(k: int, n: int) -> float:
    """Sine work over attention work at sequence length ``n``, ``k / n^2``."""
    _check_positive(k=k, n=n)
    return k / (n * n)


def forward_cost(d: int, k: int, r: int, n: int | None = None) -> CostBreakdown:
    _check_positive(d=d, k=k, r=r)
    base = d * k
    lowrank = d * r + k * r
    sine = k * d
    return CostBreakdown(
        d=d,
        k=k,
        r=r,
        base_ops=base,
        lowrank_ops=lowrank,
        sine_ops=sine,
        total_forward_ops=base + lowrank + sine,
        backward_extra_ops=backward_extra_cost(d, k, r),
        param_count=lora_param_count(d, k, r),
        overhead_ratio=overhead_ratio(d, k, r),
        attention_ratio=attention_ratio(k, n) if n is not None else None,
    )


def rank_table(d: int, k: int, ranks: tuple[int, ...] = DEFAULT_RANKS, n: int | None = None) -> list[CostBreakdown]:
    return [forward_cost(d, k, r, n) for r in ranks]


def benchmark_forward(
    d: int, k: int, ranks: tuple[int, ...] = DEFAULT_RANKS, repeats: int = 20, seed: int = 0
) -> dict[int, float]:
    """
    Mean wall-clock seconds of one sine-adapter forward per rank.

    Informational only: the timings depend on the machine.
    """
    stream = RngStream(seed)
    x = stream.gaussian_vector(d)
    out: dict[int, float] = {}
    for r in ranks:
        ap = init_adapter(stream, AdapterKind(), k, d, r)
        ap.b = stream.gaussian_vector(d * r).reshape(d, r)
        start = time.perf_counter()
        for _ in range(repeats):
            adapter_forward(ap, x)
        out[r] = (time.perf_counter() - start) / repeats
        logger.debug("benchmark", extra={"rank": r, "seconds": out[r]})
    return out
