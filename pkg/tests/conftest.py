import sys

import numpy as np
import pytest

from artifact.glm_core import ExponentialFamily, SampleSet, TargetSample

GAUSS = ExponentialFamily.GAUSSIAN
POIS = ExponentialFamily.POISSON
BERN = ExponentialFamily.BERNOULLI
FAMILIES = [GAUSS, POIS, BERN]


def ar1(d: int, rho: float) -> np.ndarray:
    i = np.arange(d)
    return rho ** np.abs(i[:, None] - i[None, :])


def draw_y(family, eta, rng):
    if family is GAUSS:
        return eta + rng.standard_normal(eta.size)
    if family is POIS:
        return rng.poisson(np.exp(eta)).astype(float)
    return (rng.random(eta.size) < 1 / (1 + np.exp(-eta))).astype(float)


def make_source(rng, family=GAUSS, beta=(1.0, 1.0), n=200, rho=0.2, scale=1.0):
    beta = np.asarray(beta, float)
    X = rng.multivariate_normal(np.zeros(beta.size), ar1(beta.size, rho), n) * scale
    return SampleSet(X, draw_y(family, X @ beta, rng))


def make_target(rng, family=GAUSS, gamma=(1.0, 0.8), theta=(-1.0,), n=100, rho=0.2, scale=1.0):
    gamma, theta = np.asarray(gamma, float), np.asarray(theta, float)
    d1 = gamma.size
    W = rng.multivariate_normal(np.zeros(d1 + theta.size), ar1(d1 + theta.size, rho), n) * scale
    y = draw_y(family, W @ np.concatenate([gamma, theta]), rng)
    return TargetSample(W[:, :d1], W[:, d1:], y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
