from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from advbmt.synth import synth_scenarios

settings.register_profile(
    "repo", max_examples=60, deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def synth8():
    return synth_scenarios(8, 0)


@pytest.fixture(scope="session")
def synth_small():
    return synth_scenarios(3, 5)


@pytest.fixture(scope="session")
def b_step():
    """Brute-force single-step quantization bound, worst of both directions."""
    from advbmt.kinematics import Direction, quantization_bound

    return max(quantization_bound(direction=d) for d in Direction)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
