import pytest

_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Report one acceptance criterion; the lines are repeated in the terminal summary.

    A failing criterion is an assertion error unless ``known_gap`` names the
    recorded analysis of why it cannot be met, in which case the test is
    marked xfail so the failure stays visible without breaking the run.
    """

    def record(number, passed, detail, known_gap=None):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        print(line)
        if not passed:
            if known_gap:
                pytest.xfail(f"criterion {number} not met: {known_gap}")
            raise AssertionError(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
