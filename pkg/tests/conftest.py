import sys
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)
sys.path.insert(0, str(Path(__file__).resolve().parent))


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def criteria(request):
    """Collects (number, title, passed, detail) verdicts for the terminal summary."""
    return request.config._criteria


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = sorted(config._criteria)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in rows:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
