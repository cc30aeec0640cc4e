from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from gazeprompt.synthetic import make_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dataset_template(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("dataset")
    make_dataset(root)
    return root


@pytest.fixture
def dataset(dataset_template, tmp_path) -> Path:
    """A private copy of the synthetic 3-participant / 12-probe dataset; returns the config path."""
    root = tmp_path / "data"
    shutil.copytree(dataset_template, root, ignore=shutil.ignore_patterns("run"))
    return root / "experiment.yaml"
