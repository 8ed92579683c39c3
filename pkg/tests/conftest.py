import pytest
import torch

from saim.trainer import set_deterministic


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic(True)
    yield


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    """Store one verdict line for the terminal summary and echo it."""
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
