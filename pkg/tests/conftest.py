import os

import pytest
import torch

# acceptance results, filled in by test_acceptance and echoed at session end
ACCEPTANCE: dict = {}


@pytest.fixture(autouse=True)
def _isolated_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("SAIR_OUTPUT_ROOT", str(tmp_path / "runs"))
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


def pytest_configure(config):
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
