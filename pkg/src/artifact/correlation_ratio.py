"""Correlation-ratio matrices linking source and target score equations.

Lambda is a diagonal of ratios mean(Y^P X^jP) / mean(Y^Q X^jQ) computed on
historical samples. Omega replaces X by the derivative of the covariate
density, estimated with Gaussian product kernels and a two-step conditional
density for the emerging covariate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .glm_core import (
    DimensionError,
    ExponentialFamily,
    SampleSet,
    TargetSample,
    cumulant_d1,
)

DENOM_TOL = 1e-8
GRID_SIZE = 20


class DegenerateCorrelationError(ValueError):
    """A ratio denominator (or numerator) is too close to zero."""


class EmptyNeighborhoodError(ValueError):
    """All kernel weights vanish at a query point."""


class RatioKind(enum.Enum):
    LAMBDA = "lambda"
    OMEGA = "omega"


@dataclass(frozen=True)
class HistoricalData:
    """Historical (X, Y) samples for the source and the target."""

    source: SampleSet
    target: SampleSet

    def __post_init__(self) -> None:
        if self.source.d != self.target.d:
            raise DimensionError(
                f"source has {self.source.d} covariates, target has {self.target.d}"
            )

    @property
    def d1(self) -> int:
        return self.source.d


@dataclass(frozen=True)
class CorrelationRatioMatrix:
    diag: NDArray
    kind: RatioKind = RatioKind.LAMBDA
    correction: NDArray | None = None

    def __post_init__(self) -> None:
        diag = np.asarray(self.diag, dtype=float).reshape(-1)
        if not np.all(np.isfinite(diag)):
            raise DegenerateCorrelationError("ratio entries must be finite")
        corr = np.zeros_like(diag) if self.correction is None else np.asarray(self.correction, float)
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "correction", corr)

    @property
    def matrix(self) -> NDArray:
        return np.diag(self.diag)

    @property
    def d1(self) -> int:
        return self.diag.shape[0]

    def scaled(self, factor: float) -> "CorrelationRatioMatrix":
        return CorrelationRatioMatrix(self.diag * factor, self.kind, self.correction)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "diag": self.diag.tolist(),
            "correction": self.correction.tolist(),
        }


# ---------------------------------------------------------------- kernels


class KernelShape(enum.Enum):
    GAUSSIAN = "gaussian"
    EPANECHNIKOV = "epanechnikov"


@dataclass(frozen=True)
class KernelSpec:
    kernel: KernelShape = KernelShape.GAUSSIAN
    bandwidth: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "kernel", KernelShape(self.kernel))

    def profile(self, u: NDArray) -> NDArray:
        """Standardized kernel K(u)."""
        if self.kernel is KernelShape.GAUSSIAN:
            return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)

    def profile_d1(self, u: NDArray) -> NDArray:
        if self.kernel is KernelShape.GAUSSIAN:
            return -u * self.profile(u)
        return np.where(np.abs(u) <= 1.0, -1.5 * u, 0.0)

    def weights(self, diff: NDArray) -> NDArray:
        """K_h(diff) = K(diff / h) / h."""
        h = self.bandwidth
        return self.profile(diff / h) / h

    def weights_d1(self, diff: NDArray) -> NDArray:
        """Derivative of K_h(diff) with respect to diff."""
        h = self.bandwidth
        return self.profile_d1(diff / h) / (h * h)


def rule_of_thumb(x: ArrayLike) -> float:
    """1.06 * sd * n^(-1/5)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 1.0
    if sd <= 0:
        sd = 1.0
    return 1.06 * sd * x.size ** (-0.2)


def default_spec(x: ArrayLike) -> KernelSpec:
    return KernelSpec(KernelShape.GAUSSIAN, rule_of_thumb(x))


def _as_matrix(x: ArrayLike) -> NDArray:
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim <= 1 else x


def _product_weights(x_obs: NDArray, at: NDArray, specs: list[KernelSpec]) -> NDArray:
    """Product-kernel weight matrix, queries by observations."""
    w = np.ones((at.shape[0], x_obs.shape[0]))
    for k, spec in enumerate(specs):
        w *= spec.weights(x_obs[None, :, k] - at[:, None, k])
    return w


def _spec_list(spec: KernelSpec | list[KernelSpec], d: int) -> list[KernelSpec]:
    return list(spec) if isinstance(spec, (list, tuple)) else [spec] * d


def nw_regression(
    x_obs: ArrayLike, z_obs: ArrayLike, at: ArrayLike, spec: KernelSpec | list[KernelSpec]
) -> NDArray | float:
    """Nadaraya-Watson estimate of E[z | x] at the query point(s)."""
    X = _as_matrix(x_obs)
    z = np.asarray(z_obs, dtype=float).reshape(-1)
    at_arr = np.asarray(at, dtype=float)
    scalar = at_arr.ndim == 0 or (at_arr.ndim == 1 and X.shape[1] > 1 and at_arr.size == X.shape[1])
    Q = at_arr.reshape(-1, X.shape[1])
    w = _product_weights(X, Q, _spec_list(spec, X.shape[1]))
    tot = w.sum(axis=1)
    if np.any(tot <= 0):
        raise EmptyNeighborhoodError("no kernel weight at query point")
    out = (w @ z) / tot
    return float(out[0]) if scalar else out


class KernelDensity:
    """Product-kernel density estimate with an analytic gradient."""

    def __init__(self, x_obs: ArrayLike, specs: KernelSpec | list[KernelSpec] | None = None):
        self.X = _as_matrix(x_obs)
        d = self.X.shape[1]
        self.specs = (
            [default_spec(self.X[:, k]) for k in range(d)] if specs is None else _spec_list(specs, d)
        )

    def __call__(self, at: ArrayLike) -> NDArray:
        Q = np.asarray(at, dtype=float).reshape(-1, self.X.shape[1])
        return _product_weights(self.X, Q, self.specs).mean(axis=1)

    def gradient(self, at: ArrayLike) -> NDArray:
        """d f / d x_j at each query, shape (queries, d)."""
        Q = np.asarray(at, dtype=float).reshape(-1, self.X.shape[1])
        d = self.X.shape[1]
        per_dim = [
            spec.weights(self.X[None, :, k] - Q[:, None, k]) for k, spec in enumerate(self.specs)
        ]
        out = np.empty((Q.shape[0], d))
        for j in range(d):
            # d/dx of K_h(X_i - x) is minus the derivative in the difference
            term = -self.specs[j].weights_d1(self.X[None, :, j] - Q[:, None, j])
            for k in range(d):
                if k != j:
                    term = term * per_dim[k]
            out[:, j] = term.mean(axis=1)
        return out


class ConditionalDensity:
    """Two-step conditional density f(z | x) = psi(z - m(x) | x)."""

    def __init__(
        self,
        x_obs: ArrayLike,
        z_obs: ArrayLike,
        spec_h0: KernelSpec | list[KernelSpec],
        spec_h1: KernelSpec | list[KernelSpec],
        spec_h2: KernelSpec,
    ):
        self.X = _as_matrix(x_obs)
        self.z = np.asarray(z_obs, dtype=float).reshape(-1)
        d = self.X.shape[1]
        self.h0 = _spec_list(spec_h0, d)
        self.h1 = _spec_list(spec_h1, d)
        self.h2 = spec_h2
        self.resid = self.z - nw_regression(self.X, self.z, self.X, self.h0)

    def mean(self, x: ArrayLike) -> NDArray:
        return nw_regression(self.X, self.z, np.asarray(x, float).reshape(-1, self.X.shape[1]), self.h0)

    def __call__(self, z: ArrayLike, x: ArrayLike) -> NDArray:
        Q = np.asarray(x, dtype=float).reshape(-1, self.X.shape[1])
        zq = np.broadcast_to(np.asarray(z, dtype=float).reshape(-1), (Q.shape[0],))
        e = zq - self.mean(Q)
        wx = _product_weights(self.X, Q, self.h1)
        tot = wx.sum(axis=1)
        if np.any(tot <= 0):
            raise EmptyNeighborhoodError("no kernel weight at query point")
        we = self.h2.weights(self.resid[None, :] - e[:, None])
        return (wx * we).sum(axis=1) / tot

    def gradient_x(self, z: ArrayLike, x: ArrayLike, rel_step: float = 1e-4) -> NDArray:
        """Central-difference derivative of f(z | x) in each x coordinate."""
        Q = np.asarray(x, dtype=float).reshape(-1, self.X.shape[1])
        out = np.empty_like(Q)
        for j in range(Q.shape[1]):
            h = rel_step * self.h1[j].bandwidth
            up, dn = Q.copy(), Q.copy()
            up[:, j] += h
            dn[:, j] -= h
            out[:, j] = (self(z, up) - self(z, dn)) / (2.0 * h)
        return out


def two_step_conditional_density(
    x_obs: ArrayLike,
    z_obs: ArrayLike,
    spec_h0: KernelSpec | None = None,
    spec_h1: KernelSpec | None = None,
    spec_h2: KernelSpec | None = None,
) -> ConditionalDensity:
    """Residual-based conditional density estimator of z given x."""
    X = _as_matrix(x_obs)
    z = np.asarray(z_obs, dtype=float).reshape(-1)
    if X.shape[0] < 10:
        raise ValueError("conditional density needs at least 10 observations")
    specs_x = [default_spec(X[:, k]) for k in range(X.shape[1])]
    h0 = specs_x if spec_h0 is None else spec_h0
    h1 = specs_x if spec_h1 is None else spec_h1
    if spec_h2 is None:
        pilot = z - nw_regression(X, z, X, h0)
        spec_h2 = default_spec(pilot)
    return ConditionalDensity(X, z, h0, h1, spec_h2)


# ---------------------------------------------------------------- ratios


def _ratio_of_means(num_terms: NDArray, den_terms: NDArray) -> NDArray:
    num = num_terms.mean(axis=0)
    den = den_terms.mean(axis=0)
    bad = np.flatnonzero(np.abs(den) <= DENOM_TOL)
    if bad.size:
        raise DegenerateCorrelationError(
            f"denominator of component {int(bad[0]) + 1} is {den[bad[0]]:.3g}; "
            "drop that covariate from the transfer"
        )
    return num / den


def estimate_lambda_plugin(hist: HistoricalData) -> CorrelationRatioMatrix:
    """Ratio of sample means mean(Y^P X^P) / mean(Y^Q X^Q), per component."""
    num = hist.source.X * hist.source.y[:, None]
    den = hist.target.X * hist.target.y[:, None]
    return CorrelationRatioMatrix(_ratio_of_means(num, den), RatioKind.LAMBDA)


def correction_grid(n_source: int, n_target: int, size: int = GRID_SIZE) -> NDArray:
    """{0} plus `size` log-spaced corrections between 1/n_source and 1/n_target."""
    lo, hi = sorted((1.0 / n_source, 1.0 / n_target))
    return np.concatenate([[0.0], np.geomspace(lo, hi, size)])


@dataclass(frozen=True)
class CVContext:
    """What the bias-correction search needs to refit and predict.

    `fit` maps a ratio diagonal to (gamma, theta, s) where s is the source
    coefficient implied by the fitted (gamma, theta). Historical target rows
    without an emerging covariate are predicted with Z replaced by its linear
    projection on X, `x @ z_projection`, unless `target_z` is given.
    """

    fit: Callable[[NDArray], tuple[NDArray, NDArray, NDArray]]
    source_family: ExponentialFamily
    target_family: ExponentialFamily
    w_source: float = 0.5
    w_target: float = 0.5
    z_projection: NDArray | None = None
    target_z: NDArray | None = None
    loo: str = "linear"
    fd_step: float = 1e-6


@dataclass(frozen=True)
class CVTrace:
    grid: NDArray
    scores: NDArray  # (d1, len(grid)); inf marks an excluded candidate
    chosen: NDArray = field(default_factory=lambda: np.zeros(0))


def _predict_cv(
    ctx: CVContext,
    alpha_out: NDArray,
    d1: int,
    d2: int,
    xs: NDArray,
    xt: NDArray,
    zt: NDArray,
    src_rows: NDArray,
    tgt_rows: NDArray,
) -> tuple[NDArray, NDArray]:
    """Source and target predictions from per-row (gamma, theta, s) stacks."""
    s = alpha_out[src_rows][:, d1 + d2:]
    ys = cumulant_d1(ctx.source_family, np.sum(s * xs, axis=1))
    gt = alpha_out[tgt_rows]
    eta = np.sum(gt[:, :d1] * xt, axis=1)
    if d2:
        eta = eta + np.sum(gt[:, d1:d1 + d2] * zt, axis=1)
    yt = cumulant_d1(ctx.target_family, eta)
    return ys, yt


def _flatten(out: tuple[NDArray, NDArray, NDArray]) -> NDArray:
    g, t, s = out
    return np.concatenate([np.ravel(g), np.ravel(t), np.ravel(s)])


def bias_corrected_ratio(
    num_terms: NDArray,
    den_terms: NDArray,
    xs: NDArray,
    ys: NDArray,
    xt: NDArray,
    yt: NDArray,
    ctx: CVContext,
    grid: ArrayLike | None = None,
    kind: RatioKind = RatioKind.LAMBDA,
) -> tuple[CorrelationRatioMatrix, CVTrace]:
    """Shrink each plug-in ratio by the grid value minimizing leave-one-out CV.

    num_terms / den_terms hold per-row contributions whose column means form
    the ratio (Y X for Lambda). Each component is searched with the other
    components held at their plug-in values.
    """
    n_s, d1 = num_terms.shape
    n_t = den_terms.shape[0]
    base = _ratio_of_means(num_terms, den_terms)
    c_grid = correction_grid(n_s, n_t) if grid is None else np.asarray(grid, dtype=float)
    sign = np.where(base >= 0, 1.0, -1.0)

    # leave-one-out plug-in ratios: every component moves when a row leaves
    num_sum, den_sum = num_terms.sum(axis=0), den_terms.sum(axis=0)
    den_mean = den_sum / n_t
    num_mean = num_sum / n_s
    if n_s > 1:
        loo_src = (num_sum[None, :] - num_terms) / (n_s - 1) / den_mean[None, :]
    else:
        loo_src = np.repeat(base[None, :], n_s, axis=0)
    if n_t > 1:
        loo_den = (den_sum[None, :] - den_terms) / (n_t - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            loo_tgt = num_mean[None, :] / loo_den
    else:
        loo_tgt = np.repeat(base[None, :], n_t, axis=0)

    proto = _flatten(ctx.fit(base))
    gamma0, theta0, _ = ctx.fit(base)
    d1g, d2 = np.size(gamma0), np.size(theta0)
    if ctx.target_z is not None:
        zt = np.asarray(ctx.target_z, float).reshape(n_t, -1)
    elif d2:
        if ctx.z_projection is None:
            raise ValueError("target rows lack Z and no projection was supplied")
        zt = xt @ np.asarray(ctx.z_projection, float).reshape(d1, d2)
    else:
        zt = np.zeros((n_t, 0))

    jac = None
    if ctx.loo == "linear":
        jac = np.empty((proto.size, d1))
        for k in range(d1):
            h = ctx.fd_step * max(1.0, abs(base[k]))
            up, dn = base.copy(), base.copy()
            up[k] += h
            dn[k] -= h
            jac[:, k] = (_flatten(ctx.fit(up)) - _flatten(ctx.fit(dn))) / (2.0 * h)

    scores = np.full((d1, c_grid.size), np.inf)
    rows_s = np.arange(n_s)
    rows_t = np.arange(n_s, n_s + n_t)
    for j in range(d1):
        for m, c in enumerate(c_grid):
            lam_c = base.copy()
            lam_c[j] = base[j] - sign[j] * c
            shift = np.zeros(d1)
            shift[j] = -sign[j] * c
            loo_lams = np.vstack([loo_src, loo_tgt]) + shift[None, :]
            try:
                if ctx.loo == "exact":
                    outs = np.array([_flatten(ctx.fit(l)) for l in loo_lams])
                else:
                    centre = _flatten(ctx.fit(lam_c))
                    outs = centre[None, :] + (loo_lams - lam_c[None, :]) @ jac.T
                if not np.all(np.isfinite(outs)):
                    continue
            except (np.linalg.LinAlgError, ValueError, ArithmeticError):
                continue
            ps, pt = _predict_cv(ctx, outs, d1g, d2, xs, xt, zt, rows_s, rows_t)
            scores[j, m] = ctx.w_source * np.sum((ys - ps) ** 2) + ctx.w_target * np.sum((yt - pt) ** 2)
    if np.any(np.all(~np.isfinite(scores), axis=1)):
        raise DegenerateCorrelationError("every correction candidate failed to fit")
    pick = np.argmin(scores, axis=1)  # first minimum is the smallest c
    chosen = c_grid[pick]
    diag = base - sign * chosen
    return (
        CorrelationRatioMatrix(diag, kind, chosen),
        CVTrace(c_grid, scores, chosen),
    )


def estimate_lambda_bias_corrected(
    hist: HistoricalData,
    fit_context: CVContext,
    grid: ArrayLike | None = None,
    return_trace: bool = False,
) -> CorrelationRatioMatrix | tuple[CorrelationRatioMatrix, CVTrace]:
    """Plug-in Lambda shrunk toward zero by a cross-validated correction."""
    num = hist.source.X * hist.source.y[:, None]
    den = hist.target.X * hist.target.y[:, None]
    lam, trace = bias_corrected_ratio(
        num, den, hist.source.X, hist.source.y, hist.target.X, hist.target.y,
        fit_context, grid, RatioKind.LAMBDA,
    )
    return (lam, trace) if return_trace else lam


def estimate_ab(
    hist: HistoricalData | None,
    target_current: TargetSample,
    lam: CorrelationRatioMatrix | None = None,
) -> tuple[NDArray, NDArray]:
    """a = diag(Lambda), b = Lambda * mean(X^Q Z^Q^T) over the current target sample."""
    if lam is None:
        if hist is None:
            raise ValueError("need historical data or a ratio matrix")
        lam = estimate_lambda_plugin(hist)
    a = lam.diag.copy()
    m_qz = target_current.X.T @ target_current.Z / target_current.n
    return a, a[:, None] * m_qz


# ---------------------------------------------------------------- Omega


@dataclass(frozen=True)
class OmegaInputs:
    """Historical data for the density-based ratio.

    source: historical (X^P, Y^P). target: historical rows carrying X, Z and Y.
    aux_xz: extra (X, Z) rows without a response. extra_x: extra X rows.
    """

    source: SampleSet
    target: TargetSample
    aux_x: NDArray | None = None
    aux_z: NDArray | None = None
    extra_x: NDArray | None = None


@dataclass
class OmegaDensities:
    source_density: KernelDensity
    target_marginal: KernelDensity
    conditional: ConditionalDensity | None

    def target_joint(self, x: NDArray, z: NDArray) -> NDArray:
        fx = self.target_marginal(x)
        if self.conditional is None:
            return fx
        return fx * self.conditional(np.asarray(z).reshape(-1), x)

    def target_joint_grad(self, x: NDArray, z: NDArray) -> NDArray:
        """Product rule: f'(x) f(z|x) + f(x) d f(z|x) / dx."""
        fx = self.target_marginal(x)
        dfx = self.target_marginal.gradient(x)
        if self.conditional is None:
            return dfx
        zz = np.asarray(z).reshape(-1)
        fc = self.conditional(zz, x)
        dfc = self.conditional.gradient_x(zz, x)
        return dfx * fc[:, None] + fx[:, None] * dfc


def build_omega_densities(data: OmegaInputs) -> OmegaDensities:
    src = KernelDensity(data.source.X)
    xs_all = [data.target.X]
    if data.aux_x is not None:
        xs_all.append(_as_matrix(data.aux_x))
    if data.extra_x is not None:
        xs_all.append(_as_matrix(data.extra_x))
    marginal = KernelDensity(np.vstack(xs_all))
    cond = None
    if data.target.d2 > 1:
        raise DimensionError("density-based ratio supports a single emerging covariate")
    if data.target.d2 == 1:
        cx, cz = [data.target.X], [data.target.Z[:, 0]]
        if data.aux_x is not None and data.aux_z is not None:
            cx.append(_as_matrix(data.aux_x))
            cz.append(np.asarray(data.aux_z, float).reshape(-1))
        cx_all = np.vstack(cx)
        if cx_all.shape[0] < 10:
            raise ValueError("need at least 10 rows with the emerging covariate")
        cond = two_step_conditional_density(cx_all, np.concatenate(cz))
    return OmegaDensities(src, marginal, cond)


def omega_terms(data: OmegaInputs, dens: OmegaDensities) -> tuple[NDArray, NDArray]:
    num = data.source.y[:, None] * dens.source_density.gradient(data.source.X)
    zt = data.target.Z[:, 0] if data.target.d2 else np.zeros(data.target.n)
    den = data.target.y[:, None] * dens.target_joint_grad(data.target.X, zt)
    return num, den


def estimate_omega(
    data: OmegaInputs,
    fit_context: CVContext | None = None,
    grid: ArrayLike | None = None,
    densities: OmegaDensities | None = None,
) -> CorrelationRatioMatrix:
    """Density-based ratio mean(Y^P f_P'(X^P)) / mean(Y^Q d f_Q(X^Q, Z^Q) / dX)."""
    dens = build_omega_densities(data) if densities is None else densities
    num, den = omega_terms(data, dens)
    num_mean = num.mean(axis=0)
    num_sd = num.std(axis=0)
    null = np.flatnonzero(np.abs(num_mean) < 1e-3 * np.maximum(num_sd, 1e-300))
    if null.size:
        raise DegenerateCorrelationError(
            f"numerator of component {int(null[0]) + 1} is indistinguishable from zero"
        )
    if fit_context is None:
        return CorrelationRatioMatrix(_ratio_of_means(num, den), RatioKind.OMEGA)
    ctx = fit_context
    if ctx.target_z is None and data.target.d2:
        ctx = CVContext(**{**ctx.__dict__, "target_z": data.target.Z})
    omega, _ = bias_corrected_ratio(
        num, den, data.source.X, data.source.y, data.target.X, data.target.y, ctx, grid,
        RatioKind.OMEGA,
    )
    return omega
