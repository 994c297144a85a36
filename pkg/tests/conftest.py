"""Shared fixtures plus a terminal summary for the acceptance suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from kernelrules.interchange import BinarizationTable, NormsTable

DATA_DIR = Path(__file__).parent / "data"

_acceptance_results: list[tuple[str, str, str]] = []


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


def make_norms_table(matrix, classes=None, preds=None, confs=None, kernel_ids=None):
    matrix = np.asarray(matrix, dtype=np.float64)
    n, k = matrix.shape
    return NormsTable(
        image_ids=tuple(f"img{i}" for i in range(n)),
        kernel_ids=tuple(kernel_ids) if kernel_ids else tuple(range(k)),
        values=matrix,
        true_class=tuple(classes) if classes else tuple("x" for _ in range(n)),
        cnn_pred=tuple(preds) if preds else None,
        cnn_conf=tuple(confs) if confs else None,
    )


def make_bits_table(matrix, classes, preds=None, confs=None, kernel_ids=None):
    matrix = np.asarray(matrix, dtype=np.uint8)
    n, k = matrix.shape
    return BinarizationTable(
        image_ids=tuple(f"img{i}" for i in range(n)),
        kernel_ids=tuple(kernel_ids) if kernel_ids else tuple(range(k)),
        values=matrix,
        true_class=tuple(classes),
        cnn_pred=tuple(preds) if preds else None,
        cnn_conf=tuple(confs) if confs else None,
    )


def record_acceptance(name: str, passed: bool, detail: str = ""):
    _acceptance_results.append((name, "PASS" if passed else "FAIL", detail))
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in _acceptance_results:
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"{verdict}  {name}{suffix}")
