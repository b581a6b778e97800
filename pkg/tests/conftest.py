import time
from contextlib import contextmanager

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=100,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("quick", parent=settings.get_profile("default"), max_examples=20)
settings.load_profile("default")

_ACCEPTANCE: dict[int, str] = {}


class _Record:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def acceptance():
    """Context manager that logs one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def run(number: int, title: str):
        rec = _Record()
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _ACCEPTANCE[number] = (
                f"criterion {number:>2} FAIL  {title} [{time.perf_counter() - t0:.2f} s] {rec.detail} :: {msg}"
            )
            raise
        _ACCEPTANCE[number] = f"criterion {number:>2} PASS  {title} [{time.perf_counter() - t0:.2f} s] {rec.detail}"
        print(_ACCEPTANCE[number])

    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])
