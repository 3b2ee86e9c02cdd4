import pytest

# (criterion number, title, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance result and fail the test when it did not pass."""

    def record(num: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((num, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {num}. {title}: {detail}")
        assert passed, detail

    return record
