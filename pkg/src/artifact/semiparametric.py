"""Partially linear target model E[Y | X, Z] = G_Q'(gamma'X + t(Z)).

The unknown function t is fit by local-constant kernel likelihood given
gamma, then profiled out. The source enters through an explicit map from
gamma (with the fitted t plugged in) to the source coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize

from .correlation_ratio import (
    CorrelationRatioMatrix,
    EmptyNeighborhoodError,
    KernelSpec,
    default_spec,
)
from .cr_tll_engine import Weights
from .glm_core import (
    DimensionError,
    DomainError,
    ExponentialFamily,
    SampleSet,
    TargetSample,
    cumulant,
    cumulant_d1,
    cumulant_d2,
    fit_mle,
)
from .transfer_map import PARAM_BOX, NonConvergenceError

T_BOX = 50.0
T_TOL = 1e-10
T_MAX_ITER = 100
GRID_EXTRA = 50
FD_STEP = 1e-5
_ROUNDOFF = 64 * np.finfo(float).eps


def _z_column(target: TargetSample) -> NDArray:
    if target.d2 != 1:
        raise DimensionError("the partially linear model takes a scalar Z")
    return target.Z[:, 0]


def _offset(gamma: ArrayLike, target: TargetSample) -> NDArray:
    g = np.asarray(gamma, dtype=float).reshape(-1)
    if g.size != target.d1:
        raise DimensionError("gamma length does not match X")
    return target.X @ g if g.size else np.zeros(target.n)


def local_loglik(
    family: ExponentialFamily,
    gamma: ArrayLike,
    t_value: float,
    target: TargetSample,
    z0: float,
    spec: KernelSpec,
) -> float:
    """sum_i K_h(z_i - z0) [y_i (gamma'x_i + t) - G_Q(gamma'x_i + t)]."""
    family = ExponentialFamily.parse(family)
    w = spec.weights(_z_column(target) - z0)
    if not w.sum() > 0:
        raise EmptyNeighborhoodError(f"no kernel weight near z0={z0:g}")
    eta = _offset(gamma, target) + t_value
    return float(np.sum(w * (target.y * eta - cumulant(family, eta))))


def _solve_local(family: ExponentialFamily, K: NDArray, y: NDArray, off: NDArray, where: NDArray) -> NDArray:
    """Row-wise maximizer t_q of sum_i K_qi [y_i (off_i + t) - G(off_i + t)].

    Newton with per-row step halving. `where` labels the rows in errors.
    """
    tot = K.sum(axis=1)
    bad = ~(tot > 0)
    if np.any(bad):
        raise EmptyNeighborhoodError(f"no kernel weight near z={where[np.argmax(bad)]:g}")
    if family is ExponentialFamily.GAUSSIAN:
        t = (K @ (y - off)) / tot
        _check_box(t, where)
        return t

    # the local intercept has a finite maximizer only if the weighted responses straddle the boundary
    pos = K > 0
    has_hi = np.any(pos & (y[None, :] > 0), axis=1)
    if family is ExponentialFamily.BERNOULLI:
        ok = has_hi & np.any(pos & (y[None, :] < 1), axis=1)
    else:
        ok = has_hi
    if not np.all(ok):
        k = int(np.argmin(ok))
        raise DomainError(f"local fit left |t| <= {T_BOX:g} near z={where[k]:g} (no finite maximizer)")

    def obj(t: NDArray) -> NDArray:
        eta = off[None, :] + t[:, None]
        return np.sum(K * (y[None, :] * eta - cumulant(family, eta)), axis=1)

    t = np.zeros(K.shape[0])
    f = obj(t)
    done = np.zeros(K.shape[0], dtype=bool)
    for _ in range(T_MAX_ITER):
        eta = off[None, :] + t[:, None]
        g = np.sum(K * (y[None, :] - cumulant_d1(family, eta)), axis=1)
        h = np.sum(K * cumulant_d2(family, eta), axis=1)
        # stop on the Newton step: with no finite maximizer it stays near 1 and t runs into the box
        step = g / np.maximum(h, 1e-300)
        active = ~done & (np.abs(step) > T_TOL)
        if not np.any(active):
            _check_box(t, where)
            return t
        step = np.clip(np.where(active, step, 0.0), -10.0, 10.0)
        scale = np.ones_like(t)
        for _ in range(40):
            cand = t + scale * step
            out = np.abs(cand) > T_BOX + 10.0
            f_c = np.where(out, -np.inf, obj(np.where(out, 0.0, cand)))
            # ties to roundoff count as ascent so Newton keeps its full step near the optimum
            worse = active & ~(f_c >= f - _ROUNDOFF * (1.0 + np.abs(f)))
            if not np.any(worse):
                break
            scale = np.where(worse, 0.5 * scale, scale)
        # a row whose tiny step cannot raise the objective sits at the optimum up to roundoff
        stalled = worse & (np.abs(step) <= 1e-6 * (1.0 + np.abs(t)))
        done |= stalled
        move = active & ~worse
        t = np.where(move, cand, t)
        f = np.where(move, f_c, f)
        _check_box(t, where)
    raise NonConvergenceError(
        f"local fit did not converge near z={where[np.argmax(active)]:g}", float(np.max(np.abs(g)))
    )


def _check_box(t: NDArray, where: NDArray) -> None:
    out = ~(np.abs(t) <= T_BOX)
    if np.any(out):
        k = int(np.argmax(out))
        raise DomainError(f"local fit left |t| <= {T_BOX:g} near z={where[k]:g} (t={t[k]:.3g})")


@dataclass(frozen=True)
class LocalConstantFit:
    """Fitted t on a sorted grid, linearly interpolated (held constant outside)."""

    queries: NDArray
    values: NDArray

    def __call__(self, z: ArrayLike) -> NDArray | float:
        z_arr = np.asarray(z, dtype=float)
        out = np.interp(z_arr, self.queries, self.values)
        return float(out) if z_arr.ndim == 0 else out


def default_queries(z: ArrayLike, extra: int = GRID_EXTRA) -> NDArray:
    """Observed values plus `extra` equispaced interior points."""
    z = np.asarray(z, dtype=float).reshape(-1)
    inner = np.linspace(z.min(), z.max(), extra + 2)[1:-1] if extra > 0 and z.max() > z.min() else []
    return np.unique(np.concatenate([z, inner]))


def fit_t_given_gamma(
    family: ExponentialFamily,
    gamma: ArrayLike,
    target: TargetSample,
    spec: KernelSpec | None = None,
    query_points: ArrayLike | None = None,
) -> LocalConstantFit:
    """Local-constant likelihood fit of t at every query point."""
    family = ExponentialFamily.parse(family)
    z = _z_column(target)
    spec = spec or default_spec(z)
    q = default_queries(z) if query_points is None else np.unique(np.asarray(query_points, float).reshape(-1))
    K = spec.weights(z[None, :] - q[:, None])
    t = _solve_local(family, K, target.y, _offset(gamma, target), q)
    return LocalConstantFit(q, t)


def fit_t_leave_one_out(
    family: ExponentialFamily, gamma: ArrayLike, target: TargetSample, spec: KernelSpec
) -> NDArray:
    """t fitted at each z_i without observation i."""
    family = ExponentialFamily.parse(family)
    z = _z_column(target)
    K = spec.weights(z[None, :] - z[:, None])
    np.fill_diagonal(K, 0.0)
    return _solve_local(family, K, target.y, _offset(gamma, target), z)


# ---------------------------------------------------------------- source map


@dataclass(frozen=True)
class ProfileSourceMap:
    """Source coefficients as an explicit function of gamma and fitted t.

    Moment form: s = m_pp^-1 Lambda mean_i x_i G_Q'(gamma'x_i + t(z_i)).
    Stein form (standard normal source covariates): m_pp is replaced by v,
    the mean conditional variance of the source response.

    With a Gaussian target and a known target second moment m_qq (from
    historical covariates or a known design) the inner mean splits into
    m_qq gamma + mean_i xbar(z_i) t(z_i), where xbar(z) is the least-squares
    projection of X on (1, Z) in the target sample. Both pieces are far less
    noisy than the raw sample mean of x x' gamma.
    """

    lam: CorrelationRatioMatrix
    target_family: ExponentialFamily
    m_pp: NDArray | None = None
    v: float | None = None
    m_qq: NDArray | None = None

    def __post_init__(self) -> None:
        if (self.m_pp is None) == (self.v is None):
            raise ValueError("give exactly one of m_pp and v")
        fam = ExponentialFamily.parse(self.target_family)
        object.__setattr__(self, "target_family", fam)
        if self.m_qq is not None and fam is not ExponentialFamily.GAUSSIAN:
            raise DomainError("the split form with m_qq needs a Gaussian target")

    @classmethod
    def moment(
        cls, lam: CorrelationRatioMatrix, target_family, source: SampleSet, m_qq: NDArray | None = None
    ) -> "ProfileSourceMap":
        return cls(lam, target_family, m_pp=source.X.T @ source.X / source.n, m_qq=m_qq)

    @classmethod
    def stein(
        cls, lam: CorrelationRatioMatrix, target_family, v: float, m_qq: NDArray | None = None
    ) -> "ProfileSourceMap":
        if not v > 1e-8:
            raise DomainError("conditional variance of the source response vanishes")
        return cls(lam, target_family, v=float(v), m_qq=m_qq)

    def inner_mean(self, gamma: ArrayLike, target: TargetSample, t_at_data: NDArray) -> NDArray:
        """Estimate of E[X G_Q'(gamma'X + t(Z))]."""
        if self.m_qq is None:
            eta = _offset(gamma, target) + t_at_data
            return target.X.T @ cumulant_d1(self.target_family, eta) / target.n
        D = np.column_stack([np.ones(target.n), target.Z])
        coef = np.linalg.lstsq(D, target.X, rcond=None)[0]
        xbar = D @ coef
        g = np.asarray(gamma, dtype=float).reshape(-1)
        return np.asarray(self.m_qq, float) @ g + xbar.T @ t_at_data / target.n

    def __call__(self, gamma: ArrayLike, target: TargetSample, t_at_data: NDArray) -> NDArray:
        ex = self.lam.diag * self.inner_mean(gamma, target, t_at_data)
        if self.m_pp is not None:
            return np.linalg.solve(self.m_pp, ex)
        return ex / self.v


def profile_cr_tll(
    source_map: ProfileSourceMap | None,
    source: tuple[ExponentialFamily, SampleSet] | None,
    target: tuple[ExponentialFamily, TargetSample],
    weights: Weights,
    spec: KernelSpec,
    gamma: ArrayLike,
) -> float:
    """Weighted source likelihood at s(gamma) plus target likelihood with leave-one-out t."""
    t_fam = ExponentialFamily.parse(target[0])
    data = target[1]
    g = np.asarray(gamma, dtype=float).reshape(-1)
    if np.max(np.abs(g), initial=0.0) > PARAM_BOX:
        raise DomainError(f"gamma outside the box |gamma| <= {PARAM_BOX}")
    off = _offset(g, data)
    t_loo = fit_t_leave_one_out(t_fam, g, data, spec)
    eta = off + t_loo
    total = weights.w_target * float(np.sum(data.y * eta - cumulant(t_fam, eta)))
    w_p = float(weights.w_sources.sum()) if weights.w_sources.size else 0.0
    if source is not None and source_map is not None and w_p > 0:
        s_fam = ExponentialFamily.parse(source[0])
        t_in = fit_t_given_gamma(t_fam, g, data, spec, query_points=_z_column(data))(_z_column(data))
        s = source_map(g, data, t_in)
        eta_p = source[1].X @ s
        total += w_p * float(np.sum(source[1].y * eta_p - cumulant(s_fam, eta_p)))
    return total


@dataclass(frozen=True)
class ProfileFit:
    gamma: NDArray
    t_hat: LocalConstantFit
    bandwidth: float
    loglik: float
    converged: bool
    iterations: int = 0


def _central_gradient(f: Callable[[NDArray], float], x: NDArray, step: float) -> NDArray:
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        g[k] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def fit_partially_linear(
    source: tuple[ExponentialFamily, SampleSet] | None,
    target: tuple[ExponentialFamily, TargetSample],
    lam: CorrelationRatioMatrix | None,
    weights: Weights,
    spec: KernelSpec | None = None,
    source_map: ProfileSourceMap | None = None,
    m_qq: ArrayLike | None = None,
    init: ArrayLike | None = None,
    fd_step: float = FD_STEP,
    max_iter: int = 200,
) -> ProfileFit:
    """Maximize the profile objective over gamma by BFGS on central-difference gradients.

    With no source (or zero source weight) this is the target-only profile fit.
    The default source map is the moment form with m_pp from the source
    sample, split through `m_qq` when that is given.
    """
    t_fam = ExponentialFamily.parse(target[0])
    data = target[1]
    z = _z_column(data)
    spec = spec or default_spec(z)
    if source is not None and source_map is None and lam is not None:
        source_map = ProfileSourceMap.moment(
            lam, t_fam, source[1], None if m_qq is None else np.asarray(m_qq, float)
        )
    if data.d1 == 0:
        g0 = np.zeros(0)
        t_hat = fit_t_given_gamma(t_fam, g0, data, spec)
        ll = profile_cr_tll(None, None, target, weights, spec, g0)
        return ProfileFit(g0, t_hat, spec.bandwidth, ll, True, 0)
    if init is None:
        g0 = fit_mle(t_fam, data.as_sample()).coefficients[: data.d1]
    else:
        g0 = np.asarray(init, dtype=float).reshape(-1)
    scale = max(data.n, 1)

    def negf(g: NDArray) -> float:
        return -profile_cr_tll(source_map, source, target, weights, spec, g) / scale

    res = minimize(
        negf,
        g0,
        jac=lambda g: _central_gradient(negf, g, fd_step),
        method="BFGS",
        options={"gtol": 1e-6, "maxiter": max_iter},
    )
    gamma = np.asarray(res.x, dtype=float)
    t_hat = fit_t_given_gamma(t_fam, gamma, data, spec)
    return ProfileFit(gamma, t_hat, spec.bandwidth, -float(res.fun) * scale, bool(res.success), int(res.nit))
