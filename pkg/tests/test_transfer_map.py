import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.correlation_ratio import CorrelationRatioMatrix, OmegaInputs, build_omega_densities
from artifact.glm_core import DomainError, SampleSet, TargetSample, fit_mle
from artifact.transfer_map import (
    GaussianDesign,
    LinearLinearMap,
    MomentEstimates,
    estimate_var_y_given_x,
    fd_jacobian,
    map_density_based,
    map_jacobian,
    map_linear_linear,
    map_linear_source,
    map_stein_normal,
    map_wu_ritt,
    wu_ritt_solve,
)
from conftest import BERN, FAMILIES, GAUSS, POIS, ar1, make_source, make_target


def lam_of(*v):
    return CorrelationRatioMatrix(np.array(v, float))


def test_linear_linear_identity():
    m = MomentEstimates(np.eye(2), np.eye(2), np.zeros((2, 1)))
    tmap = map_linear_linear(lam_of(1, 1), m)
    assert np.allclose(tmap.evaluate([0.3, -0.7], [2.0]), [0.3, -0.7])


def test_linear_linear_matrix_oracle(rng):
    A = rng.standard_normal((3, 3))
    m_pp = A @ A.T + 3 * np.eye(3)
    B = rng.standard_normal((3, 3))
    m_qq = B @ B.T + np.eye(3)
    m_qz = rng.standard_normal((3, 2))
    lam = lam_of(*rng.uniform(0.5, 2, 3))
    g, t = rng.standard_normal(3), rng.standard_normal(2)
    tmap = map_linear_linear(lam, MomentEstimates(m_pp, m_qq, m_qz))
    oracle = np.linalg.inv(m_pp) @ np.diag(lam.diag) @ (m_qq @ g + m_qz @ t)
    assert np.allclose(tmap.evaluate(g, t), oracle, atol=1e-12)
    assert np.array_equal(map_jacobian(tmap, g, t), map_jacobian(tmap, -g, 2 * t))


def test_univariate_reduces_to_ab():
    a, b = 1.7, 0.4
    tmap = map_linear_linear(lam_of(a), MomentEstimates([[1.0]], [[1.0]], [[b / a]]))
    assert tmap.evaluate([0.5], [2.0])[0] == pytest.approx(a * 0.5 + b * 2.0)


def test_linear_source_matches_linear_for_gaussian_target(rng):
    src = make_source(rng)
    tgt = make_target(rng)
    m = MomentEstimates.from_samples(src, tgt)
    lam = lam_of(1.2, 0.7)
    lin = map_linear_linear(lam, m)
    ls = map_linear_source(lam, m, GAUSS, tgt)
    for _ in range(5):
        g, t = rng.standard_normal(2), rng.standard_normal(1)
        assert np.allclose(lin.evaluate(g, t), ls.evaluate(g, t), atol=1e-12)


def test_linear_source_poisson_zero(rng):
    src = make_source(rng)
    tgt = make_target(rng, family=POIS, gamma=(0.3, 0.2), theta=(0.1,))
    m = MomentEstimates.from_samples(src, tgt)
    lam = lam_of(1.2, 0.7)
    s = map_linear_source(lam, m, POIS, tgt).evaluate([0, 0], [0])
    assert np.allclose(s, np.linalg.solve(m.m_pp, lam.diag * tgt.X.mean(axis=0)), atol=1e-12)


def test_stein_identity_case():
    n = 4
    X = np.array([[1.0, 1], [1, -1], [-1, 1], [-1, -1]])
    tgt = TargetSample(X, np.zeros((n, 1)), np.zeros(n))
    tmap = map_stein_normal(lam_of(1, 1), 1.0, GAUSS, tgt)
    assert np.allclose(tmap.evaluate([0.4, -0.9], [3.0]), [0.4, -0.9])
    second = map_stein_normal(lam_of(2, 3), 4.0, GAUSS, tgt, second_form=True)
    assert np.allclose(second.evaluate([1.0, 1.0], [5.0]), [0.5, 0.75])


def test_stein_poisson_scaling_lognormal(rng):
    n = 10_000
    W = rng.standard_normal((n, 3))
    tgt = TargetSample(W[:, :2], W[:, 2:], np.zeros(n))
    c = np.array([0.3, -0.2, 0.25])
    tmap = map_stein_normal(lam_of(1, 1), 1.0, POIS, tgt, second_form=True)
    scale = tmap.evaluate(c[:2], c[2:])[0] / c[0]
    assert scale == pytest.approx(np.exp(c @ c / 2), rel=0.05)
    design = map_stein_normal(lam_of(1, 1), 1.0, POIS, GaussianDesign(np.eye(3), 2), second_form=True)
    assert design.evaluate(c[:2], c[2:])[0] / c[0] == pytest.approx(np.exp(c @ c / 2), rel=1e-12)


def test_var_y_given_x(rng):
    src = make_source(rng)
    assert estimate_var_y_given_x(GAUSS, fit_mle(GAUSS, src), src) == 1.0
    assert estimate_var_y_given_x(POIS, np.zeros(2), src) == 1.0
    n = 20_000
    X = rng.standard_normal((n, 1))
    ps = SampleSet(X, rng.poisson(np.exp(0.3 * X[:, 0])).astype(float))
    v = estimate_var_y_given_x(POIS, fit_mle(POIS, ps), ps)
    assert v == pytest.approx(np.exp(0.3 ** 2 / 2), rel=0.05)
    with pytest.raises(ValueError):
        estimate_var_y_given_x(POIS, np.zeros(1))


def test_density_map_properties(rng):
    n = 600
    xp = rng.standard_normal((n, 1))
    src = SampleSet(xp, xp[:, 0] + rng.standard_normal(n))
    W = rng.standard_normal((n, 2))
    tgt = TargetSample(W[:, :1], W[:, 1:], W @ [1.0, 0.5] + rng.standard_normal(n))
    dens = build_omega_densities(OmegaInputs(src, tgt))
    beta = fit_mle(GAUSS, src).coefficients
    tmap = map_density_based(lam_of(1.0), dens, GAUSS, beta, src, GAUSS, tgt)
    assert np.array_equal(tmap.evaluate([0.0], [0.7]), [0.0])
    twice = map_density_based(lam_of(2.0), dens, GAUSS, beta, src, GAUSS, tgt)
    assert np.allclose(twice.evaluate([0.4], [0.2]), 2 * tmap.evaluate([0.4], [0.2]), rtol=1e-14)


def test_density_map_matched_distributions(rng):
    n = 5000
    xp = rng.standard_normal((n, 1))
    src = SampleSet(xp, xp[:, 0] + rng.standard_normal(n))
    xq = rng.standard_normal((n, 1))
    tgt = TargetSample(xq, np.zeros((n, 0)), xq[:, 0] + rng.standard_normal(n))
    dens = build_omega_densities(OmegaInputs(src, tgt))
    tmap = map_density_based(lam_of(1.0), dens, GAUSS, [1.0], src, GAUSS, tgt)
    assert tmap.evaluate([0.8], [])[0] == pytest.approx(0.8, abs=0.1)


def test_wu_ritt_gaussian_matches_linear_source(rng):
    src = make_source(rng, n=300)
    tgt = make_target(rng, n=150)
    lam = lam_of(1.3, 0.6)
    m = MomentEstimates.from_samples(src, tgt)
    ls = map_linear_source(lam, m, GAUSS, tgt)
    wr = map_wu_ritt(lam, GAUSS, src, GAUSS, tgt)
    lin = map_linear_linear(lam, m)
    for _ in range(5):
        g, t = rng.standard_normal(2), rng.standard_normal(1)
        assert np.allclose(wr.evaluate(g, t), ls.evaluate(g, t), atol=1e-8)
        assert np.allclose(lin.evaluate(g, t), ls.evaluate(g, t), atol=1e-8)


def test_wu_ritt_fixed_point_and_contraction(rng):
    src = make_source(rng, n=300)
    tgt = make_target(rng, n=150)
    lam = lam_of(1.3, 0.6)
    g, t = np.array([0.5, 0.2]), np.array([-0.4])
    res = wu_ritt_solve(lam, GAUSS, src, GAUSS, tgt, g, t, s0=np.zeros(2))
    assert res.converged
    again = wu_ritt_solve(lam, GAUSS, src, GAUSS, tgt, g, t, s0=res.s, m=1)
    assert again.steps[0] <= 1e-10
    assert np.all(np.diff(res.steps[1:]) <= 0)


def test_wu_ritt_poisson_residual(rng):
    n = 400
    x = rng.standard_normal((n, 1))
    src = SampleSet(x, rng.poisson(np.exp(0.5 * x[:, 0])).astype(float))
    W = rng.standard_normal((n, 2))
    tgt = TargetSample(W[:, :1], W[:, 1:], rng.poisson(np.exp(W @ [0.4, 0.2])).astype(float))
    res = wu_ritt_solve(lam_of(0.9), POIS, src, POIS, tgt, [0.4], [0.2])
    assert res.converged and res.residual <= 1e-8


def test_zero_lambda_gives_zero_jacobian(rng):
    src = make_source(rng)
    tgt = make_target(rng)
    m = MomentEstimates.from_samples(src, tgt)
    for tmap in (map_linear_linear(lam_of(0, 0), m), map_linear_source(lam_of(0, 0), m, POIS, tgt)):
        assert np.all(tmap.jacobian([0.1, 0.2], [0.3]) == 0)


def test_parameter_box(rng):
    tmap = LinearLinearMap(np.eye(1), np.zeros((1, 1)))
    with pytest.raises(DomainError):
        tmap.evaluate([51.0], [0.0])


def _maps(rng, family):
    src = make_source(rng, family=family if family is not BERN else GAUSS, n=120, beta=(0.3, 0.2))
    tgt = make_target(rng, family=family, gamma=(0.3, 0.2), theta=(0.1,), n=80)
    m = MomentEstimates.from_samples(src, tgt)
    lam = lam_of(1.1, 0.8)
    s_fam = family if family is not BERN else GAUSS
    dens = build_omega_densities(OmegaInputs(src, tgt))
    beta = fit_mle(s_fam, src).coefficients
    return [
        map_linear_linear(lam, m),
        map_linear_source(lam, m, family, tgt),
        map_stein_normal(lam, 1.3, family, tgt),
        map_stein_normal(lam, 1.3, family, tgt, second_form=True),
        map_stein_normal(lam, 1.3, family, GaussianDesign(ar1(3, 0.2), 2)),
        map_stein_normal(lam, 1.3, family, GaussianDesign(ar1(3, 0.2), 2), second_form=True),
        map_density_based(lam, dens, s_fam, beta, src, family, tgt),
        map_wu_ritt(lam, s_fam, src, family, tgt),
    ]


@pytest.mark.parametrize("family", FAMILIES)
def test_jacobians_match_finite_differences(family, rng):
    for tmap in _maps(rng, family):
        for _ in range(10 if tmap.analytic_jacobian else 3):
            a = rng.uniform(-0.5, 0.5, 3)
            jac = tmap.jacobian_alpha(a)
            fd = fd_jacobian(tmap.evaluate_alpha, a, 1e-4)
            assert np.allclose(jac, fd, rtol=1e-3, atol=1e-6 * (1 + np.abs(fd).max())), type(tmap).__name__


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_linear_homogeneity(kappa, alpha):
    tmap = LinearLinearMap(np.array([[1.0, 0.2], [0.1, 2.0]]), np.array([[0.3], [-0.5]]))
    a = np.array(alpha)
    assert np.allclose(tmap.evaluate_alpha(kappa * a), kappa * tmap.evaluate_alpha(a), atol=1e-12)
