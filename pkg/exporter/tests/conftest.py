"""Session fixtures: one synthetic image tree and one trained toy CNN."""

from __future__ import annotations

import torch
import pytest

import toydata

_acceptance_results = []


@pytest.fixture(scope="session")
def image_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    return toydata.write_image_tree(root)


@pytest.fixture(scope="session")
def trained_model(image_tree):
    return toydata.train_toy_model(image_tree)


@pytest.fixture(scope="session")
def model_path(trained_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "toy.pt"
    torch.save(trained_model, path)
    return path


def record_acceptance(name, passed, detail=""):
    _acceptance_results.append((name, "PASS" if passed else "FAIL", detail))
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in _acceptance_results:
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"{verdict}  {name}{suffix}")
