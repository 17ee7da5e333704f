import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    def report(number: int, ok: bool, detail: str, seconds: float, budget: float | None = None):
        within = "" if budget is None else (" within budget" if seconds < budget else f" OVER {budget:.0f}s budget")
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f}s{within})"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
