"""Canonical exponential-family GLM primitives.

Cumulant functions and their derivatives, log-likelihoods, scores and a
Newton maximum-likelihood fitter with step-halving. Likelihoods drop every
term that does not depend on the coefficients.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

FIT_TOL = 1e-10
FIT_MAX_ITER = 100
MAX_HALVINGS = 30
# exp(690.7) ~ 1e300, the largest Poisson mean we allow a Newton step to reach
POISSON_ETA_CAP = float(np.log(1e300))
_ROUNDOFF = 64 * np.finfo(float).eps


class DomainError(ValueError):
    """Input outside the domain of a function (non-finite values, bad labels)."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class RankDeficientError(np.linalg.LinAlgError):
    """Design matrix is numerically singular."""


class ExponentialFamily(enum.Enum):
    """Canonical-link exponential family."""

    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    BERNOULLI = "bernoulli"

    @classmethod
    def parse(cls, tag: "str | ExponentialFamily") -> "ExponentialFamily":
        if isinstance(tag, cls):
            return tag
        key = str(tag).strip().lower()
        aliases = {
            "gaussian": cls.GAUSSIAN, "normal": cls.GAUSSIAN, "linear": cls.GAUSSIAN,
            "poisson": cls.POISSON,
            "bernoulli": cls.BERNOULLI, "logistic": cls.BERNOULLI, "binomial": cls.BERNOULLI,
        }
        if key not in aliases:
            raise DomainError(f"unknown family tag {tag!r}")
        return aliases[key]


def _as_finite(u: ArrayLike) -> NDArray:
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("cumulant argument must be finite")
    return arr


def _sigmoid(u: NDArray) -> NDArray:
    # split by sign so exp never overflows
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def cumulant_derivative(family: ExponentialFamily, u: ArrayLike, order: int) -> NDArray | float:
    """Derivative of the cumulant G of the given order (0 to 4)."""
    if order not in (0, 1, 2, 3, 4):
        raise ValueError("order must be between 0 and 4")
    arr = _as_finite(u)
    scalar = arr.ndim == 0
    a = np.atleast_1d(arr)
    if family is ExponentialFamily.GAUSSIAN:
        if order == 0:
            out = 0.5 * a * a
        elif order == 1:
            out = a.copy()
        elif order == 2:
            out = np.ones_like(a)
        else:
            out = np.zeros_like(a)
    elif family is ExponentialFamily.POISSON:
        with np.errstate(over="ignore"):
            out = np.exp(a)
    elif family is ExponentialFamily.BERNOULLI:
        if order == 0:
            out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
        else:
            p = _sigmoid(a)
            q = 1.0 - p
            if order == 1:
                out = p
            elif order == 2:
                out = p * q
            elif order == 3:
                out = p * q * (1.0 - 2.0 * p)
            else:
                out = p * q * (1.0 - 6.0 * p * q)
    else:  # pragma: no cover
        raise DomainError(f"unsupported family {family}")
    return float(out[0]) if scalar else out


def cumulant(family: ExponentialFamily, u: ArrayLike) -> NDArray | float:
    """G(u): u^2/2, exp(u) or log(1 + exp(u))."""
    return cumulant_derivative(family, u, 0)


def cumulant_d1(family: ExponentialFamily, u: ArrayLike) -> NDArray | float:
    """G'(u), the conditional mean (inverse canonical link)."""
    return cumulant_derivative(family, u, 1)


def cumulant_d2(family: ExponentialFamily, u: ArrayLike) -> NDArray | float:
    """G''(u), the conditional variance."""
    return cumulant_derivative(family, u, 2)


def cumulant_d3(family: ExponentialFamily, u: ArrayLike) -> NDArray | float:
    return cumulant_derivative(family, u, 3)


@dataclass(frozen=True)
class SampleSet:
    """Covariates X (n x d) and responses y (n)."""

    X: NDArray
    y: NDArray

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            if X.shape[1] == y.shape[0] and X.shape[0] == 1:
                X = X.T
            else:
                raise DimensionError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if y.shape[0] < 1:
            raise DimensionError("sample must have at least one row")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DomainError("sample contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def validate(self, family: ExponentialFamily) -> "SampleSet":
        check_response(family, self.y)
        return self

    def take(self, idx: NDArray) -> "SampleSet":
        return SampleSet(self.X[idx], self.y[idx])


@dataclass(frozen=True)
class TargetSample:
    """Target covariates X (n x d1), emerging covariates Z (n x d2), responses y."""

    X: NDArray
    Z: NDArray
    y: NDArray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        X = np.asarray(self.X, dtype=float).reshape(n, -1)
        Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        if n < 1:
            raise DimensionError("sample must have at least one row")
        for arr in (X, Z, y):
            if not np.all(np.isfinite(arr)):
                raise DomainError("sample contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d1(self) -> int:
        return self.X.shape[1]

    @property
    def d2(self) -> int:
        return self.Z.shape[1]

    @property
    def W(self) -> NDArray:
        """Stacked design (X, Z)."""
        return np.hstack([self.X, self.Z])

    def as_sample(self) -> SampleSet:
        return SampleSet(self.W, self.y)

    def validate(self, family: ExponentialFamily) -> "TargetSample":
        check_response(family, self.y)
        return self

    def take(self, idx: NDArray) -> "TargetSample":
        return TargetSample(self.X[idx], self.Z[idx], self.y[idx])


def check_response(family: ExponentialFamily, y: NDArray) -> None:
    if family is ExponentialFamily.BERNOULLI and not np.all((y == 0) | (y == 1)):
        raise DomainError("Bernoulli responses must be 0 or 1")
    if family is ExponentialFamily.POISSON and not np.all((y >= 0) & (y == np.round(y))):
        raise DomainError("Poisson responses must be nonnegative integers")


@dataclass(frozen=True)
class GlmFit:
    coefficients: NDArray
    loglik: float
    iterations: int
    converged: bool
    residual_variance: float
    score_norm: float = field(default=float("nan"))


def _check_dims(coefficients: ArrayLike, data: SampleSet) -> NDArray:
    b = np.asarray(coefficients, dtype=float).reshape(-1)
    if b.shape[0] != data.d:
        raise DimensionError(f"{b.shape[0]} coefficients for {data.d} covariates")
    return b


def log_likelihood(family: ExponentialFamily, coefficients: ArrayLike, data: SampleSet) -> float:
    """sum_i y_i * eta_i - G(eta_i) with eta = X b."""
    b = _check_dims(coefficients, data)
    eta = data.X @ b
    return float(data.y @ eta - np.sum(cumulant(family, eta)))


def score(family: ExponentialFamily, coefficients: ArrayLike, data: SampleSet) -> NDArray:
    b = _check_dims(coefficients, data)
    eta = data.X @ b
    return data.X.T @ (data.y - cumulant_d1(family, eta))


def neg_hessian(family: ExponentialFamily, coefficients: ArrayLike, data: SampleSet) -> NDArray:
    b = _check_dims(coefficients, data)
    w = cumulant_d2(family, data.X @ b)
    H = data.X.T @ (data.X * w[:, None])
    return 0.5 * (H + H.T)


def residual_variance(family: ExponentialFamily, coefficients: ArrayLike, data: SampleSet) -> float:
    """sum (y - mean)^2 / (n - 1)."""
    b = _check_dims(coefficients, data)
    r = data.y - cumulant_d1(family, data.X @ b)
    return float(r @ r / max(data.n - 1, 1))


def fit_mle(
    family: ExponentialFamily,
    data: SampleSet,
    init: ArrayLike | None = None,
    tol: float = FIT_TOL,
    max_iter: int = FIT_MAX_ITER,
) -> GlmFit:
    """Newton-Raphson with step-halving for a canonical GLM."""
    family = ExponentialFamily.parse(family)
    XtX = data.X.T @ data.X
    if data.n < data.d or np.linalg.cond(XtX) > 1e12:
        raise RankDeficientError("design matrix is rank deficient")
    b = np.zeros(data.d) if init is None else _check_dims(init, data).copy()
    ll = log_likelihood(family, b, data)
    g = score(family, b, data)
    it = 0
    while it < max_iter and np.max(np.abs(g)) > tol:
        it += 1
        step = np.linalg.solve(neg_hessian(family, b, data), g)
        if family is ExponentialFamily.POISSON:
            peak = np.max(data.X @ (b + step))
            if peak > POISSON_ETA_CAP:
                step *= max(POISSON_ETA_CAP - np.max(data.X @ b), 1.0) / max(peak - np.max(data.X @ b), 1.0)
        t = 1.0
        gmax = np.max(np.abs(g))
        for _ in range(MAX_HALVINGS + 1):
            cand = b + t * step
            ll_new = log_likelihood(family, cand, data)
            if np.isfinite(ll_new):
                if ll_new >= ll:
                    g_new = score(family, cand, data)
                    break
                # near the optimum the likelihood ties to roundoff; then the score decides
                if ll - ll_new <= _ROUNDOFF * (1.0 + abs(ll)):
                    g_new = score(family, cand, data)
                    if np.max(np.abs(g_new)) < gmax:
                        break
            t *= 0.5
        else:
            break
        if ll_new == ll and np.max(np.abs(g_new)) >= gmax:
            break
        b, ll, g = cand, ll_new, g_new
    gnorm = float(np.max(np.abs(g)))
    return GlmFit(
        coefficients=b,
        loglik=ll,
        iterations=it,
        converged=gnorm <= tol,
        residual_variance=residual_variance(family, b, data),
        score_norm=gnorm,
    )
