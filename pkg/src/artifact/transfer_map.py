"""Source coefficients as a function of target coefficients, beta = s(gamma, theta).

Each map evaluates s and its Jacobian with respect to alpha = (gamma, theta).
Expectations over the target covariates are either empirical means over the
current target sample or exact Gaussian expectations under a known design.
"""

from __future__ import annotations

import enum
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .correlation_ratio import CorrelationRatioMatrix, OmegaDensities
from .glm_core import (
    DimensionError,
    DomainError,
    ExponentialFamily,
    GlmFit,
    RankDeficientError,
    SampleSet,
    TargetSample,
    cumulant,
    cumulant_d1,
    cumulant_d2,
    cumulant_derivative,
    fit_mle,
)

PARAM_BOX = 50.0
FD_STEP = 1e-6
WU_RITT_TOL = 1e-10
WU_RITT_ITER = 200


class MapForm(enum.Enum):
    LINEAR_LINEAR = "linear"
    LINEAR_SOURCE = "linear-source"
    STEIN_NORMAL = "stein"
    DENSITY_BASED = "density"
    WU_RITT = "wu-ritt"


class NonConvergenceError(ArithmeticError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (moment residual {residual:.3g})")
        self.residual = residual


@dataclass(frozen=True)
class MomentEstimates:
    m_pp: NDArray
    m_qq: NDArray
    m_qz: NDArray
    var_y_given_x: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "m_pp", np.atleast_2d(np.asarray(self.m_pp, float)))
        object.__setattr__(self, "m_qq", np.atleast_2d(np.asarray(self.m_qq, float)))
        m_qz = np.asarray(self.m_qz, float).reshape(self.m_qq.shape[0], -1)
        object.__setattr__(self, "m_qz", m_qz)

    @classmethod
    def from_samples(
        cls, source: SampleSet, target: TargetSample, var_y_given_x: float | None = None
    ) -> "MomentEstimates":
        return cls(
            source.X.T @ source.X / source.n,
            target.X.T @ target.X / target.n,
            target.X.T @ target.Z / target.n,
            var_y_given_x,
        )


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2.0 * np.pi)


def gaussian_expectation(family: ExponentialFamily, sd: float, order: int) -> float:
    """E[G^(order)(u)] for u ~ N(0, sd^2) by Gauss-Hermite quadrature."""
    if family is ExponentialFamily.GAUSSIAN:
        return float(cumulant_derivative(family, 0.0, order)) if order >= 1 else 0.5 * sd * sd
    if family is ExponentialFamily.POISSON and order >= 1:
        return float(np.exp(0.5 * sd * sd))
    vals = cumulant_derivative(family, sd * _GH_NODES, order)
    return float(_GH_WEIGHTS @ vals)


@dataclass(frozen=True)
class GaussianDesign:
    """Known N(0, cov) law of the stacked covariates (X, Z) with d1 leading entries."""

    cov: NDArray
    d1: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, float)))

    def sd(self, alpha: NDArray) -> float:
        return float(np.sqrt(max(alpha @ self.cov @ alpha, 0.0)))

    def expect(self, family: ExponentialFamily, alpha: NDArray, order: int) -> float:
        return gaussian_expectation(family, self.sd(alpha), order)

    def expect_grad(self, family: ExponentialFamily, alpha: NDArray, order: int) -> NDArray:
        """d/d alpha of E[G^(order)(alpha'W)], which is cov alpha E[G^(order+2)] by Stein."""
        return self.cov @ alpha * self.expect(family, alpha, order + 2)

    def mean_x_d1(self, family: ExponentialFamily, alpha: NDArray) -> NDArray:
        """E[X G'(alpha'W)] = cov_x. alpha E[G''] by Stein's identity."""
        return self.cov[: self.d1] @ alpha * self.expect(family, alpha, 2)

    def mean_x_d1_jac(self, family: ExponentialFamily, alpha: NDArray) -> NDArray:
        cx = self.cov[: self.d1]
        return cx * self.expect(family, alpha, 2) + np.outer(
            cx @ alpha, self.expect_grad(family, alpha, 2)
        )

    def moments(self) -> tuple[NDArray, NDArray]:
        return self.cov[: self.d1, : self.d1], self.cov[: self.d1, self.d1:]


def fd_jacobian(func, alpha: NDArray, step: float = FD_STEP) -> NDArray:
    """Central-difference Jacobian of a vector function of alpha."""
    f0 = np.asarray(func(alpha))
    jac = np.empty((f0.size, alpha.size))
    for k in range(alpha.size):
        up, dn = alpha.copy(), alpha.copy()
        up[k] += step
        dn[k] -= step
        jac[:, k] = (np.asarray(func(up)) - np.asarray(func(dn))) / (2.0 * step)
    return jac


class TransferMap(ABC):
    """beta = s(gamma, theta) with Jacobian of shape d1 x (d1 + d2)."""

    form: MapForm
    analytic_jacobian = True

    def __init__(self, d1: int, d2: int, box: float = PARAM_BOX):
        self.d1 = d1
        self.d2 = d2
        self.box = box

    def _alpha(self, gamma: ArrayLike, theta: ArrayLike) -> NDArray:
        g = np.asarray(gamma, dtype=float).reshape(-1)
        t = np.asarray(theta, dtype=float).reshape(-1)
        if g.size != self.d1 or t.size != self.d2:
            raise DimensionError(f"expected ({self.d1}, {self.d2}) parameters, got ({g.size}, {t.size})")
        a = np.concatenate([g, t])
        if not np.all(np.isfinite(a)) or (a.size and np.max(np.abs(a)) > self.box):
            raise DomainError(f"parameters outside the box |alpha| <= {self.box}")
        return a

    def evaluate(self, gamma: ArrayLike, theta: ArrayLike) -> NDArray:
        return self.evaluate_alpha(self._alpha(gamma, theta))

    def jacobian(self, gamma: ArrayLike, theta: ArrayLike) -> NDArray:
        return self.jacobian_alpha(self._alpha(gamma, theta))

    def evaluate_alpha(self, alpha: NDArray) -> NDArray:
        return self._evaluate(np.asarray(alpha, float))

    def jacobian_alpha(self, alpha: NDArray) -> NDArray:
        alpha = np.asarray(alpha, float)
        jac = self._jacobian(alpha)
        if jac is None:
            jac = fd_jacobian(self._evaluate, alpha)
        return jac

    @abstractmethod
    def _evaluate(self, alpha: NDArray) -> NDArray: ...

    def _jacobian(self, alpha: NDArray) -> NDArray | None:
        return None


def _check_invertible(m: NDArray, name: str) -> NDArray:
    if np.linalg.cond(m) > 1e12:
        raise RankDeficientError(f"{name} is numerically singular")
    return np.linalg.inv(m)


class LinearLinearMap(TransferMap):
    """s = A gamma + B theta with constant A (d1 x d1) and B (d1 x d2)."""

    form = MapForm.LINEAR_LINEAR

    def __init__(self, A: ArrayLike, B: ArrayLike, box: float = PARAM_BOX):
        A = np.asarray(A, dtype=float)
        A = np.diag(A) if A.ndim == 1 else A
        B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
        super().__init__(A.shape[1], B.shape[1], box)
        self.A, self.B = A, B
        self._jac = np.hstack([A, B])

    def _evaluate(self, alpha: NDArray) -> NDArray:
        return self._jac @ alpha

    def _jacobian(self, alpha: NDArray) -> NDArray:
        return self._jac.copy()


def map_linear_linear(
    lam: CorrelationRatioMatrix, moments: MomentEstimates, box: float = PARAM_BOX
) -> LinearLinearMap:
    """s = m_pp^-1 Lambda (m_qq gamma + m_qz theta)."""
    P = _check_invertible(moments.m_pp, "m_pp") @ lam.matrix
    return LinearLinearMap(P @ moments.m_qq, P @ moments.m_qz, box)


def linear_map_from_ab(a: ArrayLike, b: ArrayLike) -> LinearLinearMap:
    """s = a * gamma + b theta; a vector means a diagonal matrix."""
    return LinearLinearMap(a, b)


class LinearSourceMap(TransferMap):
    """s = m_pp^-1 Lambda mean_i x_i G_Q'(alpha' w_i) over the target sample."""

    form = MapForm.LINEAR_SOURCE

    def __init__(self, P: NDArray, family: ExponentialFamily, target: TargetSample, box: float = PARAM_BOX):
        super().__init__(target.d1, target.d2, box)
        self.P, self.family, self.target = P, family, target
        self._W = target.W

    def _evaluate(self, alpha: NDArray) -> NDArray:
        mu = cumulant_d1(self.family, self._W @ alpha)
        return self.P @ (self.target.X.T @ mu) / self.target.n

    def _jacobian(self, alpha: NDArray) -> NDArray:
        v = cumulant_d2(self.family, self._W @ alpha)
        return self.P @ (self.target.X.T @ (self._W * v[:, None])) / self.target.n


def map_linear_source(
    lam: CorrelationRatioMatrix,
    moments: MomentEstimates,
    target_family: ExponentialFamily,
    target: TargetSample,
    box: float = PARAM_BOX,
) -> LinearSourceMap:
    P = _check_invertible(moments.m_pp, "m_pp") @ lam.matrix
    return LinearSourceMap(P, ExponentialFamily.parse(target_family), target, box)


class SteinNormalMap(TransferMap):
    """Maps valid for standard-normal source covariates.

    Form 1: s = Lambda E[X G_Q'(alpha'W)] / v.
    Form 2: s = E[G_Q''(alpha'W)] / v * Lambda gamma.
    v is E{Var[Y^P | X^P]}. Expectations are target-sample means or exact
    Gaussian expectations when a GaussianDesign is supplied.
    """

    form = MapForm.STEIN_NORMAL

    def __init__(
        self,
        lam: CorrelationRatioMatrix,
        var_y_given_x: float,
        family: ExponentialFamily,
        target: TargetSample | GaussianDesign,
        second_form: bool = False,
        d2: int | None = None,
        box: float = PARAM_BOX,
    ):
        if not var_y_given_x > 1e-8:
            raise DomainError("conditional variance of the source response vanishes")
        if isinstance(target, GaussianDesign):
            d1 = target.d1
            d2 = target.cov.shape[0] - d1
        else:
            d1, d2 = target.d1, target.d2
        super().__init__(d1, d2, box)
        self.lam = lam.diag.copy()
        self.v = float(var_y_given_x)
        self.family = family
        self.target = target
        self.second_form = second_form
        self._W = None if isinstance(target, GaussianDesign) else target.W

    def _mean_d2(self, alpha: NDArray) -> tuple[float, NDArray]:
        if self._W is None:
            return (self.target.expect(self.family, alpha, 2),
                    self.target.expect_grad(self.family, alpha, 2))
        eta = self._W @ alpha
        m = float(np.mean(cumulant_d2(self.family, eta)))
        grad = self._W.T @ cumulant_derivative(self.family, eta, 3) / eta.size
        return m, grad

    def _evaluate(self, alpha: NDArray) -> NDArray:
        if self.second_form:
            m, _ = self._mean_d2(alpha)
            return m / self.v * self.lam * alpha[: self.d1]
        if self._W is None:
            ex = self.target.mean_x_d1(self.family, alpha)
        else:
            ex = self.target.X.T @ cumulant_d1(self.family, self._W @ alpha) / self.target.n
        return self.lam * ex / self.v

    def _jacobian(self, alpha: NDArray) -> NDArray:
        if self.second_form:
            m, grad = self._mean_d2(alpha)
            jac = np.outer(self.lam * alpha[: self.d1], grad) / self.v
            jac[:, : self.d1] += m / self.v * np.diag(self.lam)
            return jac
        if self._W is None:
            ej = self.target.mean_x_d1_jac(self.family, alpha)
        else:
            v = cumulant_d2(self.family, self._W @ alpha)
            ej = self.target.X.T @ (self._W * v[:, None]) / self.target.n
        return self.lam[:, None] * ej / self.v


def map_stein_normal(
    lam: CorrelationRatioMatrix,
    var_y_given_x: float,
    target_family: ExponentialFamily,
    target: TargetSample | GaussianDesign,
    second_form: bool = False,
    box: float = PARAM_BOX,
) -> SteinNormalMap:
    return SteinNormalMap(lam, var_y_given_x, ExponentialFamily.parse(target_family), target, second_form, box=box)


def estimate_var_y_given_x(
    source_family: ExponentialFamily,
    source_fit: GlmFit | NDArray,
    source: SampleSet | None = None,
    design: GaussianDesign | None = None,
) -> float:
    """Mean of G_P''(beta' x) over the source sample, or its expectation under a known design."""
    beta = source_fit.coefficients if isinstance(source_fit, GlmFit) else np.asarray(source_fit, float)
    if design is not None:
        return design.expect(source_family, beta, 2)
    if source is None:
        raise ValueError("need the source sample or a known design")
    return float(np.mean(cumulant_d2(source_family, source.X @ beta)))


class DensityBasedMap(TransferMap):
    """s = mean(f_Q G_Q''(alpha'W)) / mean(f_P Var[Y^P|X^P]) * Omega gamma."""

    form = MapForm.DENSITY_BASED

    def __init__(
        self,
        omega: CorrelationRatioMatrix,
        f_target: NDArray,
        denominator: float,
        family: ExponentialFamily,
        target: TargetSample,
        box: float = PARAM_BOX,
    ):
        if not abs(denominator) > 1e-8:
            raise DomainError("density-weighted source variance vanishes")
        super().__init__(target.d1, target.d2, box)
        self.omega = omega.diag.copy()
        self.f = np.asarray(f_target, float).reshape(-1)
        self.den = float(denominator)
        self.family = family
        self._W = target.W

    def ratio(self, alpha: NDArray) -> float:
        return float(np.mean(self.f * cumulant_d2(self.family, self._W @ alpha))) / self.den

    def _evaluate(self, alpha: NDArray) -> NDArray:
        return self.ratio(alpha) * self.omega * alpha[: self.d1]

    def _jacobian(self, alpha: NDArray) -> NDArray:
        d3 = cumulant_derivative(self.family, self._W @ alpha, 3)
        grad = self._W.T @ (self.f * d3) / self.f.size / self.den
        jac = np.outer(self.omega * alpha[: self.d1], grad)
        jac[:, : self.d1] += self.ratio(alpha) * np.diag(self.omega)
        return jac


def map_density_based(
    omega: CorrelationRatioMatrix,
    densities: OmegaDensities,
    source_family: ExponentialFamily,
    source_coefficients: ArrayLike,
    source: SampleSet,
    target_family: ExponentialFamily,
    target: TargetSample,
    box: float = PARAM_BOX,
) -> DensityBasedMap:
    beta = np.asarray(source_coefficients, float)
    f_p = densities.source_density(source.X)
    den = float(np.mean(f_p * cumulant_d2(source_family, source.X @ beta)))
    z = target.Z[:, 0] if target.d2 else np.zeros(target.n)
    f_q = densities.target_joint(target.X, z)
    return DensityBasedMap(omega, f_q, den, ExponentialFamily.parse(target_family), target, box)


@dataclass(frozen=True)
class WuRittResult:
    s: NDArray
    iterations: int
    converged: bool
    residual: float
    steps: NDArray


def wu_ritt_solve(
    lam: CorrelationRatioMatrix,
    source_family: ExponentialFamily,
    source: SampleSet,
    target_family: ExponentialFamily,
    target: TargetSample,
    gamma: ArrayLike,
    theta: ArrayLike,
    s0: ArrayLike | None = None,
    m: int = WU_RITT_ITER,
    tol: float = WU_RITT_TOL,
) -> WuRittResult:
    """Newton iteration on mean X G_P'(s'X) = Lambda mean X G_Q'(gamma'X + theta'Z).

    The left side is the gradient of the convex function mean G_P(s'X), so each
    Newton step is damped by halving until that function minus s'rhs decreases.
    """
    alpha = np.concatenate([np.ravel(gamma), np.ravel(theta)]).astype(float)
    rhs = lam.diag * (target.X.T @ cumulant_d1(target_family, target.W @ alpha)) / target.n
    X = source.X
    n = source.n
    if s0 is None:
        s0 = fit_mle(source_family, source).coefficients
    s = np.asarray(s0, float).copy()

    def objective(v: NDArray) -> float:
        return float(np.mean(cumulant(source_family, X @ v)) - v @ rhs)

    steps = []
    resid = np.inf
    converged = False
    it = 0
    for it in range(1, m + 1):
        eta = X @ s
        g = X.T @ cumulant_d1(source_family, eta) / n - rhs
        H = X.T @ (X * cumulant_d2(source_family, eta)[:, None]) / n
        if np.min(np.linalg.eigvalsh(H)) <= 1e-10:
            raise NonConvergenceError("Wu-Ritt curvature vanished", float(np.max(np.abs(g))))
        step = -np.linalg.solve(H, g)
        f0 = objective(s)
        t = 1.0
        for _ in range(40):
            f1 = objective(s + t * step)
            if np.isfinite(f1) and f1 <= f0 + 1e-12 * (1.0 + abs(f0)):
                break
            t *= 0.5
        s = s + t * step
        steps.append(float(np.max(np.abs(t * step))))
        if steps[-1] <= tol:
            converged = True
            break
    resid = float(np.max(np.abs(X.T @ cumulant_d1(source_family, X @ s) / n - rhs)))
    return WuRittResult(s, it, converged, resid, np.asarray(steps))


class WuRittMap(TransferMap):
    """Implicit map solved by Wu-Ritt iteration, with finite-difference Jacobian."""

    form = MapForm.WU_RITT
    analytic_jacobian = False

    def __init__(
        self,
        lam: CorrelationRatioMatrix,
        source_family: ExponentialFamily,
        source: SampleSet,
        target_family: ExponentialFamily,
        target: TargetSample,
        s0: ArrayLike | None = None,
        m: int = WU_RITT_ITER,
        box: float = PARAM_BOX,
    ):
        super().__init__(target.d1, target.d2, box)
        self.lam = lam
        self.source_family = ExponentialFamily.parse(source_family)
        self.target_family = ExponentialFamily.parse(target_family)
        self.source, self.target = source, target
        if s0 is None:
            s0 = fit_mle(self.source_family, source).coefficients
        self.s0 = np.asarray(s0, float)
        self.m = m

    def _evaluate(self, alpha: NDArray) -> NDArray:
        res = wu_ritt_solve(
            self.lam, self.source_family, self.source, self.target_family, self.target,
            alpha[: self.d1], alpha[self.d1:], self.s0, self.m,
        )
        if not res.converged and res.residual > 1e-8:
            raise NonConvergenceError("Wu-Ritt iteration did not converge", res.residual)
        return res.s


def map_wu_ritt(
    lam: CorrelationRatioMatrix,
    source_family: ExponentialFamily,
    source: SampleSet,
    target_family: ExponentialFamily,
    target: TargetSample,
    s0: ArrayLike | None = None,
    m: int = WU_RITT_ITER,
) -> WuRittMap:
    return WuRittMap(lam, source_family, source, target_family, target, s0, m)


def map_jacobian(tmap: TransferMap, gamma: ArrayLike, theta: ArrayLike) -> NDArray:
    return tmap.jacobian(gamma, theta)
