import numpy as np
import pytest

from reverse_rl.mdp import Policy, build_microdrone


@pytest.fixture(scope="session")
def microdrone():
    return build_microdrone()


@pytest.fixture(scope="session")
def ideal_microdrone():
    return build_microdrone(ideal_rewards=True)


@pytest.fixture(scope="session")
def skewed_target():
    """Target policy taking a1 with probability 0.1 in every state."""
    return Policy.action_bias(4, 2, 0, 0.1)


@pytest.fixture(scope="session")
def half_behavior():
    return Policy.action_bias(4, 2, 0, 0.5)


def pytest_configure(config):
    np.set_printoptions(precision=6, suppress=True)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
