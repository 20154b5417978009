import pytest

_VERDICTS: list[str] = []


class Criterion:
    """Records one acceptance verdict and fails the test if it did not hold."""

    def __call__(self, name: str, ok: bool, detail: str, elapsed: float, budget: float) -> None:
        in_time = elapsed < budget
        status = "PASS" if ok and in_time else "FAIL"
        timing = f"{elapsed:.1f}s of {budget:.0f}s"
        if not in_time:
            timing += " (over budget)"
        line = f"[{status}] {name}: {detail} [{timing}]"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
        assert in_time, line


@pytest.fixture
def criterion() -> Criterion:
    return Criterion()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
