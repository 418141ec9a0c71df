from __future__ import annotations

ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo one verdict line per acceptance criterion, pass or fail."""
    outcomes: dict[str, str] = {}
    for category in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(category, []):
            nodeid = getattr(report, "nodeid", "")
            if ACCEPTANCE_FILE in nodeid and "::" in nodeid:
                name = nodeid.split("::", 1)[1]
                if outcomes.get(name) != "failed":
                    outcomes[name] = "passed" if category == "passed" else "failed"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(outcomes):
        verdict = "PASS" if outcomes[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{name}: {verdict}")
