import numpy as np
import pytest

from kenkf.problem import LinearModel, NoiseModel


def random_spd(rng, K, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((K, K)))
    w = np.exp(rng.uniform(0.0, np.log(cond), K))
    return (Q * w) @ Q.T


def random_linear_problem(rng, d, K):
    G = rng.standard_normal((K, d))
    noise = NoiseModel(random_spd(rng, K))
    y = rng.standard_normal(K)
    return LinearModel(G), noise, y


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` prints and records one PASS/FAIL line."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {detail}"
        print(line)
        request.config.stash.setdefault(ACCEPTANCE, {})[number] = line
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
