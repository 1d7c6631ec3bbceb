"""Shared fixtures and the acceptance-criteria terminal summary."""

import re

import numpy as np
import pytest

CRITERIA = {
    1: "code math: innocent zero-mean, threshold equality, cutoff box",
    2: "codeword-level catch-one under majority-vote collusions",
    3: "white-box exact laws: 1/sqrt(c), gradient, scale invariance",
    4: "architecture audit: carrier size and softmax normalization",
    5: "desk-scale federated reproduction (a-g)",
    6: "full-scale reproduction (optional, not CI)",
}

_PATTERN = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            match = _PATTERN.search(nodeid)
            if not match:
                continue
            num = int(match.group(1))
            rank = {"failed": 3, "error": 3, "passed": 2, "skipped": 1}[status]
            if rank > outcomes.get(num, (0, ""))[0]:
                outcomes[num] = (rank, status)
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(outcomes):
        rank, status = outcomes[num]
        verdict = {3: "FAIL", 2: "PASS", 1: "SKIP"}[rank]
        terminalreporter.write_line(
            f"criterion {num}: {verdict} - {CRITERIA.get(num, '')}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
