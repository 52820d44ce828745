"""Shared fixtures and the acceptance-criterion scoreboard."""
import pytest

_SCOREBOARD: dict[int, tuple[str, bool, str]] = {}


class CriterionLog:
    """Collects one PASS/FAIL verdict per numbered acceptance criterion."""

    def record(self, number: int, title: str, passed: bool, detail: str = "") -> bool:
        prev = _SCOREBOARD.get(number)
        # a criterion checked in several places fails if any check fails
        if prev is not None:
            passed = passed and prev[1]
            detail = f"{prev[2]}; {detail}" if prev[2] else detail
        _SCOREBOARD[number] = (title, bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} | {detail}")
        return bool(passed)


@pytest.fixture(scope="session")
def criteria() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _SCOREBOARD:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_SCOREBOARD):
        title, passed, detail = _SCOREBOARD[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}  [{detail}]")
