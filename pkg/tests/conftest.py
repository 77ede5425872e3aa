# criterion number -> "PASS ..." / "FAIL ..." line, filled by the acceptance suite
VERDICTS: dict = {}
N_CRITERIA = 10


def pytest_terminal_summary(terminalreporter):
    if not any("test_acceptance" in str(getattr(r, "nodeid", "")) for v in terminalreporter.stats.values()
               for r in v if hasattr(r, "nodeid")):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(VERDICTS.get(n, f"FAIL criterion {n:2d}: did not run to completion"))
