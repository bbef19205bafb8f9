import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(autouse=True, scope="session")
def single_thread_blas():
    with threadpool_limits(limits=1):
        yield


def random_spd(n, rng, cond=100.0):
    """SPD matrix with log-uniform spectrum in [1, cond] and random eigenbasis."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    vals = np.exp(rng.uniform(0.0, np.log(cond), size=n))
    M = (Q * vals) @ Q.T
    return 0.5 * (M + M.T)


def matern_instance(n, seed, sigma=0.2, alpha=0.6):
    from krylovgp import kernel_matrix, matern

    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(size=n))
    Y = np.sin(6 * X) + sigma * rng.standard_normal(n)
    K = kernel_matrix(matern(alpha), X)
    return X, Y, K, sigma ** 2


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Lines are printed as the test runs and repeated in the terminal summary,
    so they are visible without ``-s``.
    """

    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
