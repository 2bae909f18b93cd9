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
from collections.abc import Callable
from typing import Any

import pytest


def add_test_properties(
    partially_verifies: list[str] | None = None,
    fully_verifies: list[str] | None = None,
    test_type: str | None = None,
    derivation_technique: str | None = None,
) -> Callable[[Any], Any]:
    """
    Attach requirement traceability to a test function or class.

    Properties become markers; ``conftest.py`` copies them into the JUnit XML
    report as user properties.
    """
    marks = []
    if partially_verifies:
        marks.append(pytest.mark.PartiallyVerifies(", ".join(partially_verifies)))
    if fully_verifies:
        marks.append(pytest.mark.FullyVerifies(", ".join(fully_verifies)))
    if test_type:
        marks.append(pytest.mark.TestType(test_type))
    if derivation_technique:
        marks.append(pytest.mark.DerivationTechnique(derivation_technique))

    def decorator(obj: Any) -> Any:
        for mark in marks:
            obj = mark(obj)
        return obj

    return decorator
