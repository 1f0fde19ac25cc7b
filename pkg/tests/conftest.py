import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from contrep.models.encoder import EncoderConfig, ProjectorConfig  # noqa: E402

TINY_ENCODER = EncoderConfig(width=4, input_size=16)
TINY_PROJECTOR = ProjectorConfig(hidden_dim=32, output_dim=32)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_run_config(tmp_path, **changes):
    """A DIGITS config that trains in a few seconds on CPU."""
    raw = {
        "sequence": "DIGITS/2",
        "objective": "sl_mlp",
        "strategy": "finetune",
        "profile": "custom",
        "seeds": [0, 1],
        "output_dir": str(tmp_path / "runs"),
        "loop": {"epochs_first": 1, "epochs_rest": 1, "batch_size": 64},
        "encoder": {"width": 4},
        "projector": {"hidden_dim": 32, "output_dim": 32},
        "data": {"train_per_class": 40, "test_per_class": 20},
    }
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw


_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[1]
    if report.skipped:
        _ACCEPTANCE[name] = ("NOT RUN", str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "")
    elif report.failed:
        crash = getattr(report.longrepr, "reprcrash", None)
        _ACCEPTANCE[name] = ("FAIL", crash.message.splitlines()[0] if crash else "")
    elif report.when == "call" and name not in _ACCEPTANCE:
        _ACCEPTANCE[name] = ("PASS", "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, reason = _ACCEPTANCE[name]
        number = int(name.split("_")[2])
        label = name.split("_", 3)[3].replace("_", " ")
        line = f"{status:7s} criterion {number:2d}: {label}"
        terminalreporter.write_line(line + (f" ({reason})" if reason else ""))
