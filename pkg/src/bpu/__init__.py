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
Bounded parameter-efficient unlearning laboratory.

Desk-scale numerics for gradient-difference unlearning with low-rank adapters
whose update passes through a bounded elementwise map, plus the diagnostics
and cost model that go with it.
"""

__version__ = "0.1.0"
