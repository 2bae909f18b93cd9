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
Error types shared by every module.

Each exception carries an ``ErrorCode`` and free-form details so callers
(and the CLI exit-code mapping) can branch on the code instead of the message.
"""

from enum import Enum
from typing import Any


class ErrorCode(Enum):
    """
    Error categories.
    """

    CONTRACT_VIOLATION = "ContractViolation"
    NUMERIC_EVENT = "NumericEvent"
    NON_CONVERGENCE = "NonConvergence"
    DIVERGENCE = "Divergence"
    CONFIG = "Config"


class BpuError(Exception):
    """
    Root of the package error hierarchy.

    Parameters
    ----------
    code : ErrorCode
        Error category.
    message : str
        Human-readable description.
    **details : Any
        Structured context (shapes, layer index, iteration, ...).
    """

    def __init__(self, code: ErrorCode, message: str, **details: Any) -> None:
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = details

    def __str__(self) -> str:
        if not self.details:
            return self.message
        ctx = ", ".join(f"{k}={v}" for k, v in sorted(self.details.items()))
        return f"{self.message} ({ctx})"


class ContractViolation(BpuError):
    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(ErrorCode.CONTRACT_VIOLATION, message, **details)


class NumericEvent(BpuError):
    """
    Non-finite value produced by a computation.
    """

    def __init__(self, message: str, *, layer: int | None = None, iteration: int | None = None, **details: Any) -> None:
        super().__init__(ErrorCode.NUMERIC_EVENT, message, layer=layer, iteration=iteration, **details)
        self.layer = layer
        self.iteration = iteration


class NonConvergence(BpuError):
    """
    Iterative method ran out of iterations. ``last_estimate`` holds the final iterate.
    """

    def __init__(self, message: str, *, last_estimate: float, **details: Any) -> None:
        super().__init__(ErrorCode.NON_CONVERGENCE, message, last_estimate=last_estimate, **details)
        self.last_estimate = last_estimate


class DivergenceError(BpuError):
    def __init__(self, message: str, *, iteration: int | None = None, **details: Any) -> None:
        super().__init__(ErrorCode.DIVERGENCE, message, iteration=iteration, **details)
        self.iteration = iteration


class ConfigError(BpuError):
    """
    Configuration could not be parsed or validated.

    ``violations`` lists every problem found, one string each.
    """

    def __init__(self, message: str, violations: list[str] | None = None, **details: Any) -> None:
        super().__init__(ErrorCode.CONFIG, message, **details)
        self.violations = violations or []

    def __str__(self) -> str:
        if not self.violations:
            return super().__str__()
        lines = [super().__str__(), *(f"  - {v}" for v in self.violations)]
        return "\n".join(lines)
