import time
from contextlib import contextmanager

import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """``with criterion(n, title): ...`` records one PASS/FAIL line for the summary."""

    @contextmanager
    def run(n, title):
        start = time.perf_counter()
        notes: list[str] = []
        status, err = "PASS", ""
        try:
            yield notes
        except Exception as exc:
            status = "FAIL"
            err = (str(exc).strip().splitlines() or [type(exc).__name__])[0]
            raise
        finally:
            line = f"{status}  criterion {n:>2}: {title} [{time.perf_counter() - start:.1f}s]"
            if notes:
                line += "  " + "; ".join(notes)
            if err:
                line += f"  ({err})"
            ACCEPTANCE.append(line)
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
