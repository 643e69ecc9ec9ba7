import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, key: str, title: str):
        self.key, self.title, self.detail = key, title, ""


@pytest.fixture
def criterion():
    """Context manager that logs one PASS/FAIL line per acceptance criterion."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(key, title):
        c = _Criterion(key, title)
        start = time.perf_counter()
        ok = False
        try:
            yield c
            ok = True
        except BaseException as exc:
            if not c.detail:
                c.detail = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            raise
        finally:
            took = time.perf_counter() - start
            line = f"ACCEPTANCE {key} {'PASS' if ok else 'FAIL'}  {title}  [{took:.2f}s]  {c.detail}"
            ACCEPTANCE_LINES.append(line.rstrip())
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
