import pytest

_RESULTS = {}


class CriterionLog:
    """Collects sub-check outcomes so the run ends with one line per criterion."""

    def record(self, criterion, label, ok, detail=""):
        line = f"criterion {criterion}{label}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        print(line)
        _RESULTS.setdefault(criterion, []).append((bool(ok), line))
        return bool(ok)


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS):
        entries = _RESULTS[key]
        verdict = "PASS" if all(ok for ok, _ in entries) else "FAIL"
        terminalreporter.write_line(f"CRITERION {key}: {verdict}")
        for _, line in entries:
            terminalreporter.write_line(f"    {line}")
