import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Record one acceptance line: record(number, passed, detail); passed=None means skipped."""

    def _record(number, passed, detail=""):
        _ACCEPTANCE.append((number, None if passed is None else bool(passed), detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
    torch.use_deterministic_algorithms(False)


def set_conv(conv, weight, bias=0.0):
    with torch.no_grad():
        w = torch.as_tensor(weight, dtype=conv.weight.dtype)
        conv.weight.copy_(w.expand_as(conv.weight) if w.dim() == 0 else w.reshape(conv.weight.shape))
        conv.bias.fill_(bias) if not torch.is_tensor(bias) else conv.bias.copy_(bias)


def identity_kernel(conv):
    """Set ``conv`` (out == in channels) to pass its input through unchanged."""
    with torch.no_grad():
        conv.weight.zero_()
        kh, kw = conv.weight.shape[-2:]
        for c in range(min(conv.weight.shape[0], conv.weight.shape[1])):
            conv.weight[c, c, kh // 2, kw // 2] = 1.0
        conv.bias.zero_()
