import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from artifact.correlation_ratio import (
    DegenerateCorrelationError,
    EmptyNeighborhoodError,
    HistoricalData,
    KernelDensity,
    KernelShape,
    KernelSpec,
    OmegaInputs,
    build_omega_densities,
    correction_grid,
    default_spec,
    estimate_ab,
    estimate_lambda_bias_corrected,
    estimate_lambda_plugin,
    estimate_omega,
    nw_regression,
    rule_of_thumb,
    two_step_conditional_density,
)
from artifact.glm_core import SampleSet, TargetSample
from artifact.sim_bench import _cv_context, config_from_dict, generate_replication, population_lambda
from conftest import GAUSS, ar1

TABLE1 = {
    "schema": 1, "name": "t", "sources": [{"family": "gaussian", "beta": [1, 1, 1], "n": 1000}],
    "target": {"family": "gaussian", "gamma": [1, 0.8, -1], "theta": [1, -1], "n": 50},
    "replications": 1, "seed": 7,
}


def test_identical_samples_give_identity(rng):
    s = SampleSet(rng.standard_normal((50, 3)), rng.standard_normal(50) + 3 * np.arange(50) / 50)
    lam = estimate_lambda_plugin(HistoricalData(s, s))
    assert np.array_equal(lam.diag, np.ones(3))


def test_population_lambda_oracle():
    S = ar1(5, 0.2)
    alpha = np.array([1, 0.8, -1, 1, -1.0])
    den = S[:3] @ alpha
    num = S[:3, :3] @ np.ones(3)
    assert np.allclose(num, [1.24, 1.4, 1.24])
    assert np.allclose(den, [1.1264, 0.832, -0.64])
    lam = population_lambda(GAUSS, np.ones(3), S[:3, :3], GAUSS, alpha, S)
    assert np.allclose(lam.diag, [1.24 / 1.1264, 1.4 / 0.832, 1.24 / -0.64], rtol=1e-12)


def test_plugin_converges_to_population(rng):
    n = 400_000
    S = ar1(5, 0.2)
    W = rng.multivariate_normal(np.zeros(5), S, n)
    yq = W @ [1, 0.8, -1, 1, -1] + rng.standard_normal(n)
    X = rng.multivariate_normal(np.zeros(3), S[:3, :3], n)
    yp = X @ np.ones(3) + rng.standard_normal(n)
    lam = estimate_lambda_plugin(HistoricalData(SampleSet(X, yp), SampleSet(W[:, :3], yq)))
    assert np.allclose(lam.diag, [1.24 / 1.1264, 1.4 / 0.832, 1.24 / -0.64], rtol=0.03)


def test_denominator_guard():
    X = np.array([[1.0], [-1.0]])
    src = SampleSet(X, np.array([1.0, 0.0]))
    tgt = SampleSet(X, np.array([1.0, 1.0 - 2e-12]))
    with pytest.raises(DegenerateCorrelationError, match="component 1"):
        estimate_lambda_plugin(HistoricalData(src, tgt))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.integers(0, 10_000))
def test_scale_equivariance_and_permutation(kappa, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 2))
    src = SampleSet(X, X @ [1, 1] + rng.standard_normal(30))
    tgt = SampleSet(X, X @ [1, 2] + 0.1 * rng.standard_normal(30))
    base = estimate_lambda_plugin(HistoricalData(src, tgt)).diag
    scaled = estimate_lambda_plugin(HistoricalData(SampleSet(X, kappa * src.y), tgt)).diag
    assert np.allclose(scaled, kappa * base, rtol=1e-12)
    perm = rng.permutation(30)
    permuted = estimate_lambda_plugin(HistoricalData(src.take(perm), tgt)).diag
    assert np.allclose(permuted, base, rtol=1e-12)


def test_correction_grid():
    g = correction_grid(1000, 100)
    assert g[0] == 0 and g.size == 21
    assert g[1] == pytest.approx(1e-3) and g[-1] == pytest.approx(1e-2)


@pytest.fixture(scope="module")
def bc_case():
    doc = dict(TABLE1, hist_source_n=1000, hist_target_n=100, lambda_mode="bias-corrected")
    cfg = config_from_dict(doc).scenario
    data = generate_replication(cfg, 0)
    hist = HistoricalData(data.hist_sources[0], data.hist_target)
    return cfg, data, hist, _cv_context(cfg, data, 0)


def test_bias_correction_zero_grid_is_plugin(bc_case):
    _, _, hist, ctx = bc_case
    lam = estimate_lambda_bias_corrected(hist, ctx, grid=[0.0])
    assert np.array_equal(lam.diag, estimate_lambda_plugin(hist).diag)


def test_bias_correction_minimizes_cv(bc_case):
    cfg, _, hist, ctx = bc_case
    lam, trace = estimate_lambda_bias_corrected(hist, ctx, return_trace=True)
    for j in range(3):
        k = int(np.flatnonzero(trace.grid == trace.chosen[j])[0])
        assert trace.scores[j, k] <= trace.scores[j, 0]
        assert trace.scores[j, k] == np.min(trace.scores[j])
    truth = population_lambda(GAUSS, np.ones(3), cfg.source_cov(), GAUSS, cfg.truth, cfg.target_cov()).diag
    plug = estimate_lambda_plugin(hist).diag
    assert np.all(np.abs(lam.diag - truth) <= np.abs(plug - truth) + 0.02)


def test_bias_correction_exact_loo_runs(bc_case):
    import dataclasses

    _, data, hist, ctx = bc_case
    small = HistoricalData(hist.source.take(np.arange(60)), hist.target.take(np.arange(40)))
    exact = dataclasses.replace(ctx, loo="exact")
    lam_e = estimate_lambda_bias_corrected(small, exact, grid=correction_grid(60, 40, 5))
    lam_l = estimate_lambda_bias_corrected(small, ctx, grid=correction_grid(60, 40, 5))
    assert np.all(np.isfinite(lam_e.diag))
    assert np.allclose(lam_e.diag, lam_l.diag, atol=0.05)


def test_estimate_ab_examples(rng):
    tgt = TargetSample(np.array([[1.0], [1.0]]), np.array([[0.3], [0.3]]), np.zeros(2))
    from artifact.correlation_ratio import CorrelationRatioMatrix

    a, b = estimate_ab(None, tgt, CorrelationRatioMatrix([2.0]))
    assert a[0] == 2.0 and b[0, 0] == pytest.approx(0.6)
    n = 100_000
    ind = TargetSample(rng.standard_normal((n, 1)), rng.standard_normal((n, 1)), np.zeros(n))
    _, b = estimate_ab(None, ind, CorrelationRatioMatrix([1.0]))
    assert abs(b[0, 0]) < 0.02
    S = ar1(5, 0.2)
    W = rng.multivariate_normal(np.zeros(5), S, n)
    _, b = estimate_ab(None, TargetSample(W[:, :3], W[:, 3:], np.zeros(n)), CorrelationRatioMatrix([2.0, 1, 1]))
    assert b[0, 1] == pytest.approx(2.0 * 0.008, abs=0.02)


def test_nw_regression_examples(rng):
    spec = KernelSpec(KernelShape.GAUSSIAN, 0.5)
    x = rng.standard_normal(30)
    assert nw_regression(x, np.full(30, 5.0), 0.3, spec) == pytest.approx(5.0)
    assert nw_regression([0.0], [3.0], 0.0, spec) == 3.0
    x = rng.standard_normal(10_000)
    assert abs(nw_regression(x, 2 * x, 0.0, KernelSpec(KernelShape.GAUSSIAN, 0.1))) < 0.05
    with pytest.raises(EmptyNeighborhoodError):
        nw_regression([0.0], [1.0], 5.0, KernelSpec(KernelShape.EPANECHNIKOV, 0.1))


def test_kernel_integrates_to_one_and_is_symmetric():
    for shape in KernelShape:
        spec = KernelSpec(shape, 0.7)
        val, _ = integrate.quad(lambda u: float(spec.weights(np.array(u))), -10, 10, points=[-0.7, 0.7])
        assert val == pytest.approx(1.0, abs=1e-8)
        u = np.linspace(-2, 2, 9)
        assert np.array_equal(spec.weights(u), spec.weights(-u))
    with pytest.raises(ValueError):
        KernelSpec(KernelShape.GAUSSIAN, 0.0)
    assert rule_of_thumb(np.arange(10.0)) > 0


def test_kernel_determinism(rng):
    x = rng.standard_normal(200)
    spec = default_spec(x)
    a = nw_regression(x, x ** 2, x[:20], spec)
    b = nw_regression(x, x ** 2, x[:20], spec)
    assert np.array_equal(a, b)


def test_conditional_density_normalization_and_values(rng):
    n = 5000
    x = rng.standard_normal(n)
    z = rng.standard_normal(n)
    cd = two_step_conditional_density(x, z)
    grid = np.linspace(-8, 8, 1601)
    for x0 in np.quantile(x, [0.25, 0.5, 0.75]):
        dens = cd(grid, np.full((grid.size, 1), x0))
        assert integrate.trapezoid(dens, grid) == pytest.approx(1.0, abs=0.02)
    assert cd(0.0, [[0.0]])[0] == pytest.approx(1 / np.sqrt(2 * np.pi), abs=0.05)
    z2 = x + rng.standard_normal(n)
    cd2 = two_step_conditional_density(x, z2)
    assert cd2(1.0, [[1.0]])[0] == pytest.approx(cd2(0.0, [[0.0]])[0], abs=0.05)


def _chunked_gradient(dens: KernelDensity, x: np.ndarray) -> np.ndarray:
    return np.vstack([dens.gradient(x[i:i + 1000]) for i in range(0, x.shape[0], 1000)])


def test_density_gradient_quadrature_oracle(rng):
    n = 10_000
    x = rng.standard_normal((n, 1))
    kd = KernelDensity(x)
    est = float(np.mean(x[:, 0] * _chunked_gradient(kd, x)[:, 0]))
    truth = -integrate.quad(lambda t: t * t * stats.norm.pdf(t) ** 2, -np.inf, np.inf)[0]
    assert est == pytest.approx(truth, rel=0.10)


def test_density_gradient_matches_finite_difference(rng):
    x = rng.standard_normal((100, 2))
    kd = KernelDensity(x)
    q = rng.standard_normal((5, 2))
    h = 1e-6
    fd = np.column_stack([(kd(q + h * e) - kd(q - h * e)) / (2 * h) for e in np.eye(2)])
    assert np.allclose(kd.gradient(q), fd, rtol=1e-5, atol=1e-9)


def test_omega_identical_distributions(rng):
    n = 5000
    xp = rng.standard_normal((n, 1))
    xq = rng.standard_normal((n, 1))
    data = OmegaInputs(
        SampleSet(xp, xp[:, 0] + 0.5 * rng.standard_normal(n)),
        TargetSample(xq, np.zeros((n, 0)), xq[:, 0] + 0.5 * rng.standard_normal(n)),
    )
    omega = estimate_omega(data)
    assert omega.diag[0] == pytest.approx(1.0, abs=0.1)


def test_omega_null_numerator():
    x = np.linspace(-2, 2, 41).reshape(-1, 1)
    data = OmegaInputs(SampleSet(x, np.ones(41)), TargetSample(x, np.zeros((41, 0)), x[:, 0]))
    with pytest.raises(DegenerateCorrelationError, match="component 1"):
        estimate_omega(data)


def test_omega_with_emerging_covariate(rng):
    n = 400
    W = rng.multivariate_normal(np.zeros(2), ar1(2, 0.3), n)
    data = OmegaInputs(
        SampleSet(W[:, :1], W[:, 0] + rng.standard_normal(n)),
        TargetSample(W[:, :1], W[:, 1:], W[:, 0] + W[:, 1] + rng.standard_normal(n)),
    )
    dens = build_omega_densities(data)
    assert dens.conditional is not None
    assert np.all(np.isfinite(estimate_omega(data, densities=dens).diag))
