"""Collects one PASS/FAIL/SKIP line per acceptance criterion for the terminal summary."""
import pytest

_ROWS = []


@pytest.fixture
def criterion(record_property):
    """``criterion(name, detail)`` labels the running acceptance test."""

    def label(name, detail=""):
        record_property("criterion", name)
        record_property("detail", detail)

    return label


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props and not (report.skipped and "test_acceptance" in report.nodeid):
        return
    if report.when == "call" or (report.skipped and report.when == "setup"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        name = props.get("criterion", report.nodeid.split("::")[-1])
        detail = props.get("detail", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _ROWS.append((outcome, name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ROWS:
        return
    terminalreporter.section("acceptance criteria")
    for outcome, name, detail in _ROWS:
        terminalreporter.write_line(f"{outcome:<4}  {name}" + (f"  [{detail}]" if detail else ""))
