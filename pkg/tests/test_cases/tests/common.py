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
import contextlib
import io
import json
import logging
import re
import shutil
from collections.abc import Generator, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pytest

from bpu.cli import main

logger = logging.getLogger(__name__)


class ResultCode:
    """
    Command line exit codes.
    """

    SUCCESS = 0
    CONFIG = 1
    DIVERGENCE = 2
    IO = 3


def temp_dir_common(
    tmp_path_factory: pytest.TempPathFactory, base_name: str, *args: str
) -> Generator[Path, None, None]:
    """
    Create temporary directory and remove it after test.
    Common implementation to be reused by fixtures.

    Returns generator providing numbered path to temporary directory.
    E.g., '<TMP_PATH>/<BASE_NAME>-<ARG1>-<ARG2><NUMBER>/'.

    Parameters
    ----------
    tmp_path_factory : pytest.TempPathFactory
        Factory for temporary directories.
    base_name : str
        Base directory name.
        'self.__class__.__name__' use is recommended.
    *args : Any
        Other parameters to be included in directory name.
    """
    parts = [base_name, *args]
    dir_name = "-".join(parts)
    dir_path = tmp_path_factory.mktemp(dir_name, numbered=True)
    logger.info("Created temporary directory: %s", dir_path)
    yield dir_path
    shutil.rmtree(dir_path)
    logger.info("Removed temporary directory: %s", dir_path)


class CapturedLogs(list[logging.LogRecord]):
    """
    Log records emitted by the ``bpu`` package, queryable by field.
    """

    def get_logs(self, field: str, value: Any = None, pattern: str | None = None) -> "CapturedLogs":
        """
        Records whose ``field`` equals ``value`` or matches ``pattern``.

        ``message`` selects the formatted message and ``level`` the level name;
        any other name is looked up among the record's ``extra`` fields.
        """
        out = CapturedLogs()
        for record in self:
            match field:
                case "message":
                    actual = record.getMessage()
                case "level":
                    actual = record.levelname
                case _:
                    actual = getattr(record, field, None)
            if pattern is not None:
                if actual is not None and re.fullmatch(pattern, str(actual)):
                    out.append(record)
            elif actual == value:
                out.append(record)
        return out

    def find_log(self, field: str, value: Any = None, pattern: str | None = None) -> logging.LogRecord | None:
        found = self.get_logs(field, value=value, pattern=pattern)
        return found[0] if found else None


class _ListHandler(logging.Handler):
    def __init__(self, sink: CapturedLogs) -> None:
        super().__init__(logging.DEBUG)
        self.sink = sink

    def emit(self, record: logging.LogRecord) -> None:
        self.sink.append(record)


@contextlib.contextmanager
def capture_logs() -> Iterator[CapturedLogs]:
    """
    Collect ``bpu`` log records for the duration of the block.

    ``caplog`` is function-scoped, so class-scoped fixtures use this instead.
    """
    sink = CapturedLogs()
    handler = _ListHandler(sink)
    target = logging.getLogger("bpu")
    target.addHandler(handler)
    try:
        yield sink
    finally:
        target.removeHandler(handler)


@dataclass
class CliResult:
    return_code: int
    out_dir: Path
    stdout: str
    logs: CapturedLogs = field(default_factory=CapturedLogs)


def run_cli(command: list[str], out_dir: Path) -> CliResult:
    """Run ``bpu`` in-process, capturing stdout and log records."""
    buffer = io.StringIO()
    with capture_logs() as logs, contextlib.redirect_stdout(buffer):
        code = main(command)
    return CliResult(int(code), out_dir, buffer.getvalue(), logs)


def write_config(dir_path: Path, config: dict[str, Any], name: str = "config.json") -> Path:
    path = dir_path / name
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path


def small_config(**sections: Any) -> dict[str, Any]:
    """
    A configuration that runs in well under a second: tiny data, a short
    pretraining stage and a short unlearning run. ``sections`` are merged
    over the defaults per section.
    """
    config: dict[str, Any] = {
        "seed": 7,
        "model": {"kind": "mlp", "hidden_width": 8, "depth": 2},
        "adapter": {"kind": "sine", "rank": 2},
        "data": {"kind": "blobs", "n": 40, "num_classes": 3, "dim": 4},
        "pretrain": {"iterations": 20, "batch_size": 8},
        "train": {"iterations": 6, "batch_size": 4, "learning_rate": 1e-3},
        "diagnostics": {"explosion_window": 2},
    }
    for name, values in sections.items():
        config[name] = {**config.get(name, {}), **values} if isinstance(values, dict) else values
    return config


class CliScenario:
    """
    Common base for command line scenarios.

    Subclasses provide ``test_config`` and may override ``subcommand``. The
    ``results`` fixture runs the command once per class.
    """

    subcommand: tuple[str, ...] = ("unlearn",)

    @pytest.fixture(scope="class")
    def temp_dir(self, tmp_path_factory: pytest.TempPathFactory) -> Generator[Path, None, None]:
        yield from temp_dir_common(tmp_path_factory, self.__class__.__name__)

    @pytest.fixture(scope="class")
    def test_config(self) -> dict[str, Any]:
        raise NotImplementedError

    @pytest.fixture(scope="class")
    def out_dir(self, temp_dir: Path) -> Path:
        return temp_dir / "out"

    @pytest.fixture(scope="class")
    def command(self, temp_dir: Path, out_dir: Path, test_config: dict[str, Any]) -> list[str]:
        config_path = write_config(temp_dir, test_config)
        return [*self.subcommand, "--config", str(config_path), "--out", str(out_dir)]

    @pytest.fixture(scope="class")
    def results(self, command: list[str], out_dir: Path) -> CliResult:
        return run_cli(command, out_dir)

    @pytest.fixture(scope="class")
    def logs_info_level(self, results: CliResult) -> CapturedLogs:
        """
        Captured records with INFO level.
        """
        return results.logs.get_logs(field="level", value="INFO")

    @pytest.fixture(scope="class")
    def run_dir(self, results: CliResult) -> Path:
        """The single run directory written by ``unlearn``."""
        dirs = [p for p in results.out_dir.iterdir() if p.is_dir() and "-seed" in p.name]
        assert len(dirs) == 1, dirs
        return dirs[0]

    @pytest.fixture(autouse=True)
    def print_to_report(self, request: pytest.FixtureRequest) -> None:
        """
        Print captured records to stdout.

        Allowed "--traces" values:
        - "none" - show no traces.
        - "all" - show every record captured from the tested code.
        """
        traces_param = request.config.getoption("--traces")
        match traces_param:
            case "all":
                if "results" not in request.fixturenames:
                    return
                traces = request.getfixturevalue("results").logs
            case "none":
                traces = CapturedLogs()
            case _:
                raise RuntimeError(f'Invalid "--traces" value: {traces_param}')

        for trace in traces:
            print(f"{trace.levelname} {trace.getMessage()} {trace.__dict__}")
