import re

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        measured = "; ".join(v for k, v in report.user_properties if k == "measured")
        _ACCEPTANCE.append((int(m.group(1)), m.group(2), report.outcome, report.duration, measured))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, outcome, dur, measured in sorted(_ACCEPTANCE):
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {num:2d} {status} {name} ({dur:.1f}s)"
        if measured:
            line += f": {measured}"
        terminalreporter.write_line(line)
