import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gooed.model import GaussianPrior, GoalSetup, LinearModel, LinearOperatorHandle, NoiseModel

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, text): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        num, text = mark.args
        if hasattr(rep, "wasxfail"):
            status = "XFAIL (documented shortfall)" if rep.skipped else "XPASS"
        else:
            status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _CRITERIA.setdefault(num, []).append((text, item.name, status, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        for text, name, status, dur in _CRITERIA[num]:
            terminalreporter.write_line(f"criterion {num}: {status:<30s} {text} [{name}, {dur:.2f}s]")


def random_instance(seed, d_m=40, d=12, d_rho=2, noise=None):
    """Seeded linear-Gaussian model with a dense forward map, prior and goal."""
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((d, d_m)) / np.sqrt(d_m)
    A = rng.standard_normal((d_m, d_m))
    C = A @ A.T / d_m + 0.1 * np.eye(d_m)
    P = rng.standard_normal((d_rho, d_m)) / np.sqrt(d_m)
    sig2 = noise if noise is not None else rng.uniform(0.05, 0.2, d)
    prior = GaussianPrior.from_covariance(np.zeros(d_m), C)
    model = LinearModel(LinearOperatorHandle.from_matrix(F, "F"), prior, NoiseModel(np.broadcast_to(sig2, (d,)).copy()))
    goal = GoalSetup.build(LinearOperatorHandle.from_matrix(P, "P"), prior)
    return model, goal, dict(F=F, C=C, P=P, sig2=model.noise.variances)
