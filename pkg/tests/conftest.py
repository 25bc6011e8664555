"""Shared pytest wiring: the acceptance verdict section.

The acceptance tests record a one-line verdict with measured numbers when
they pass; this hook prints one PASS/FAIL line per acceptance test at the
end of every run, through the terminal reporter so capture never hides it.
"""

import os

_verdicts: dict[str, str] = {}


def record_verdict(line: str) -> None:
    current = os.environ.get("PYTEST_CURRENT_TEST", "?")
    name = current.split("::")[-1].split(" ")[0]
    _verdicts[name] = line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    reports = (terminalreporter.stats.get("passed", [])
               + terminalreporter.stats.get("failed", []))
    acceptance = [r for r in reports if "test_acceptance" in r.nodeid]
    if not acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for rep in sorted(acceptance, key=lambda r: r.nodeid):
        name = rep.nodeid.split("::")[-1]
        if rep.passed:
            terminalreporter.write_line(f"PASS {_verdicts.get(name, name)}")
        else:
            terminalreporter.write_line(f"FAIL {name}")
