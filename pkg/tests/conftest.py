"""Shared test helpers: finite-difference oracles and the acceptance tally."""

import numpy as np
import pytest


def fd_gradient(fn, x, eps=1e-5):
    """Central-difference gradient of a scalar function at a single point."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[j] += eps
        dn[j] -= eps
        g[j] = (fn(up) - fn(dn)) / (2.0 * eps)
    return g


def rel_err(approx, exact, floor=1e-10):
    """Vector relative error ||a - b|| / max(||b||, floor)."""
    a = np.asarray(approx, dtype=float).ravel()
    b = np.asarray(exact, dtype=float).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


# --- acceptance tally -----------------------------------------------------
#
# test_acceptance.py registers one verdict per criterion; the summary hook
# prints one PASS/FAIL line each, visible regardless of capture settings.

_CRITERIA: dict[int, tuple[str, bool]] = {}


@pytest.fixture
def criterion():
    def record(num: int, description: str, ok: bool) -> bool:
        _CRITERIA[num] = (description, bool(ok))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        desc, ok = _CRITERIA[num]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} [{verdict}] {desc}")
