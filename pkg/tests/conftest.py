"""Reports the acceptance criteria as one PASS/FAIL line each at the end of the run."""

ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for marker in report.keywords:
        if marker.startswith("criterion_"):
            number = int(marker.split("_")[1])
            ACCEPTANCE[number] = (report.passed, report.nodeid.split("::")[-1])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, name = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {name}")


def pytest_configure(config):
    for number in range(1, 12):
        config.addinivalue_line("markers", f"criterion_{number}: acceptance criterion {number}")
