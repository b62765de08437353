import numpy as np
import pytest

# criterion id -> list of (clause, passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        clauses = ACCEPTANCE[key]
        ok = all(p for _, p, _ in clauses)
        detail = "; ".join(f"{name}: {'ok' if p else 'FAILED'} ({d})" for name, p, d in clauses)
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
