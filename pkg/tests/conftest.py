import warnings

import pytest

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the summary table."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        _RESULTS.append((name, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture(autouse=True)
def _quiet_feller():
    from finfilt.errors import FellerWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FellerWarning)
        yield
