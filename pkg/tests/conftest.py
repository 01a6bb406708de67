import pytest

# filled by tests/test_acceptance.py: criterion number -> (title, passed, detail)
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
# lattice checks gathered from acceptance runs, consumed by criterion 9
LATTICE_LEDGER = {"checks": 0, "violations": 0, "runs": 0}


@pytest.fixture
def record_criterion():
    def _record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}")
        return passed

    return _record


@pytest.fixture
def lattice_ledger():
    return LATTICE_LEDGER


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
