"""Test-wide configuration: acceptance criteria summary reporting."""

CRITERIA = {}


def record_criterion(number, passed, detail):
    CRITERIA[number] = (bool(passed), detail)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: full-pipeline checks with stated tolerances")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(
            "criterion %2d: %s  %s" % (number, "PASS" if passed else "FAIL",
                                       detail))
