import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, elapsed in sorted(results):
        terminalreporter.write_line(
            f"[criterion {num:2d}] {name}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s)"
        )
