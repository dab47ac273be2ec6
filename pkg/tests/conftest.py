import numpy as np
import pytest

from vpcontrol.fields import random_field, vnorm

CRITERIA = {}


def report(number, passed, detail=""):
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


def admissible_field(seed, scale=0.5, **kw):
    """Random field rescaled to ``scale * K`` in the V-norm."""
    B = random_field(np.random.default_rng(seed), **kw)
    return B.with_theta(B.theta * (scale * B.K / vnorm(B).v_norm))


def support_points(seed, m, frac=0.9):
    rng = np.random.default_rng(seed)

    def ball():
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        return u * rng.random((m, 1)) ** (1 / 3) * frac

    return np.hstack([ball(), ball()])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
