"""Weighted transfer likelihood: assembly, maximization and inference.

The objective adds each source log-likelihood, evaluated at the source
coefficients implied by the target parameters through a transfer map, to the
target log-likelihood. Weights are inverse residual variances normalized to
sum to one.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

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
    fit_mle,
)
from .transfer_map import PARAM_BOX, LinearLinearMap, TransferMap

GRAD_TOL = 1e-8
MAX_ITER = 500
ARMIJO_C1 = 1e-4
MAX_HALVINGS = 40
_EPS = np.finfo(float).eps

SourceSpec = tuple[ExponentialFamily, SampleSet]
TargetSpec = tuple[ExponentialFamily, TargetSample]


class LineSearchError(ArithmeticError):
    """Backtracking found no acceptable step."""


class UnstableBootstrapError(RuntimeError):
    """Too many bootstrap refits failed."""


@dataclass(frozen=True)
class Weights:
    w_sources: NDArray
    w_target: float

    def __post_init__(self) -> None:
        ws = np.asarray(self.w_sources, dtype=float).reshape(-1)
        wt = float(self.w_target)
        if np.any(ws < 0) or wt < 0:
            raise ValueError("weights must be nonnegative")
        if abs(ws.sum() + wt - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")
        object.__setattr__(self, "w_sources", ws)
        object.__setattr__(self, "w_target", wt)

    @classmethod
    def equal(cls, n_sources: int) -> "Weights":
        w = 1.0 / (n_sources + 1)
        return cls(np.full(n_sources, w), 1.0 - n_sources * w)

    def to_dict(self) -> dict:
        return {"sources": self.w_sources.tolist(), "target": self.w_target}


@dataclass
class TransferFit:
    gamma: NDArray
    theta: NDArray
    covariance: NDArray
    weights: Weights
    loglik: float
    iterations: int
    converged: bool
    grad_norm: float = 0.0
    message: str = ""

    @property
    def alpha(self) -> NDArray:
        return np.concatenate([self.gamma, self.theta])

    @property
    def std_errors(self) -> NDArray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.tolist(),
            "theta": self.theta.tolist(),
            "std_errors": self.std_errors.tolist(),
            "covariance": self.covariance.tolist(),
            "weights": self.weights.to_dict(),
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "message": self.message,
        }


# ---------------------------------------------------------------- objective


class _Problem:
    """Value, gradient and Fisher information of the weighted objective."""

    def __init__(
        self,
        maps: Sequence[TransferMap],
        sources: Sequence[SourceSpec],
        target: TargetSpec,
        weights: Weights,
    ):
        if len(maps) != len(sources) or len(sources) != weights.w_sources.size:
            raise DimensionError("maps, sources and source weights must have equal length")
        self.maps = list(maps)
        self.sources = [(ExponentialFamily.parse(f), d) for f, d in sources]
        self.t_family = ExponentialFamily.parse(target[0])
        self.target = target[1]
        self.W = self.target.W
        self.weights = weights
        self.d1, self.d2 = self.target.d1, self.target.d2
        for m, (_, data) in zip(self.maps, self.sources):
            if m.d1 != self.d1 or m.d2 != self.d2 or data.d != m.d1:
                raise DimensionError("map and sample dimensions disagree")

    def split(self, alpha: NDArray) -> tuple[NDArray, NDArray]:
        return alpha[: self.d1], alpha[self.d1:]

    def value(self, alpha: NDArray) -> float:
        total = 0.0
        for w, m, (fam, data) in zip(self.weights.w_sources, self.maps, self.sources):
            if w == 0.0:
                continue
            eta = data.X @ m.evaluate_alpha(alpha)
            total += w * (data.y @ eta - np.sum(cumulant(fam, eta)))
        eta_q = self.W @ alpha
        total += self.weights.w_target * (self.target.y @ eta_q - np.sum(cumulant(self.t_family, eta_q)))
        return float(total)

    def gradient(self, alpha: NDArray) -> NDArray:
        g = np.zeros(alpha.size)
        for w, m, (fam, data) in zip(self.weights.w_sources, self.maps, self.sources):
            if w == 0.0:
                continue
            eta = data.X @ m.evaluate_alpha(alpha)
            g += w * m.jacobian_alpha(alpha).T @ (data.X.T @ (data.y - cumulant_d1(fam, eta)))
        eta_q = self.W @ alpha
        g += self.weights.w_target * self.W.T @ (self.target.y - cumulant_d1(self.t_family, eta_q))
        return g

    def value_grad(self, alpha: NDArray) -> tuple[float, NDArray]:
        total = 0.0
        g = np.zeros(alpha.size)
        for w, m, (fam, data) in zip(self.weights.w_sources, self.maps, self.sources):
            if w == 0.0:
                continue
            eta = data.X @ m.evaluate_alpha(alpha)
            total += w * (data.y @ eta - np.sum(cumulant(fam, eta)))
            g += w * m.jacobian_alpha(alpha).T @ (data.X.T @ (data.y - cumulant_d1(fam, eta)))
        eta_q = self.W @ alpha
        wt = self.weights.w_target
        total += wt * (self.target.y @ eta_q - np.sum(cumulant(self.t_family, eta_q)))
        g += wt * self.W.T @ (self.target.y - cumulant_d1(self.t_family, eta_q))
        return float(total), g

    def fisher(self, alpha: NDArray) -> NDArray:
        F = np.zeros((alpha.size, alpha.size))
        for w, m, (fam, data) in zip(self.weights.w_sources, self.maps, self.sources):
            if w == 0.0:
                continue
            J = m.jacobian_alpha(alpha)
            v = cumulant_d2(fam, data.X @ m.evaluate_alpha(alpha))
            F += w * J.T @ (data.X.T @ (data.X * v[:, None])) @ J
        v_q = cumulant_d2(self.t_family, self.W @ alpha)
        F += self.weights.w_target * self.W.T @ (self.W * v_q[:, None])
        return 0.5 * (F + F.T)


def _alpha_of(gamma: ArrayLike, theta: ArrayLike) -> NDArray:
    return np.concatenate([np.ravel(gamma), np.ravel(theta)]).astype(float)


def cr_tll_value(
    maps: Sequence[TransferMap],
    sources: Sequence[SourceSpec],
    target: TargetSpec,
    weights: Weights,
    gamma: ArrayLike,
    theta: ArrayLike,
) -> float:
    prob = _Problem(maps, sources, target, weights)
    return prob.value(_checked_alpha(gamma, theta, prob))


def cr_tll_gradient(
    maps: Sequence[TransferMap],
    sources: Sequence[SourceSpec],
    target: TargetSpec,
    weights: Weights,
    gamma: ArrayLike,
    theta: ArrayLike,
) -> NDArray:
    prob = _Problem(maps, sources, target, weights)
    return prob.gradient(_checked_alpha(gamma, theta, prob))


def fisher_info(
    maps: Sequence[TransferMap],
    sources: Sequence[SourceSpec],
    target: TargetSpec,
    weights: Weights,
    gamma: ArrayLike,
    theta: ArrayLike,
) -> NDArray:
    """w_P s'^T (sum G_P'' x x^T) s' + w_Q sum G_Q'' w w^T, summed over sources."""
    prob = _Problem(maps, sources, target, weights)
    return prob.fisher(_checked_alpha(gamma, theta, prob))


def _checked_alpha(gamma: ArrayLike, theta: ArrayLike, prob: _Problem, box: float = PARAM_BOX) -> NDArray:
    alpha = _alpha_of(gamma, theta)
    if alpha.size != prob.d1 + prob.d2:
        raise DimensionError("parameter length does not match the target design")
    if np.max(np.abs(alpha), initial=0.0) > box:
        raise DomainError(f"parameters outside the box |alpha| <= {box}")
    return alpha


def _safe_inverse(F: NDArray) -> NDArray:
    try:
        cov = np.linalg.inv(F)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(F)
    return 0.5 * (cov + cov.T)


def _posdef(B: NDArray) -> NDArray:
    """Shift a symmetric matrix just enough to make its Cholesky factor exist."""
    ev = np.linalg.eigvalsh(B)
    scale = max(float(np.max(np.abs(ev))), 1.0)
    if ev[0] > 1e-12 * scale:
        return B
    return B + (1e-10 * scale - ev[0]) * np.eye(B.shape[0])


def _target_start(target: TargetSpec, box: float) -> NDArray:
    fam, data = target
    try:
        fit = fit_mle(ExponentialFamily.parse(fam), data.as_sample())
        a = fit.coefficients
        if np.all(np.isfinite(a)) and np.max(np.abs(a)) <= box:
            return a
    except (np.linalg.LinAlgError, ValueError, ArithmeticError):
        pass
    return np.zeros(data.d1 + data.d2)


def maximize_cr_tll(
    maps: Sequence[TransferMap],
    sources: Sequence[SourceSpec],
    target: TargetSpec,
    weights: Weights,
    init: ArrayLike | None = None,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
    box: float = PARAM_BOX,
) -> TransferFit:
    """Quasi-Newton ascent with Armijo backtracking.

    The curvature model starts at the Fisher information and is refreshed by
    Powell-damped BFGS updates. It is rebuilt from the Fisher information
    whenever a step fails. Near the optimum the objective can stop changing
    in floating point before the gradient reaches `tol`; a step is then
    accepted when the value ties to roundoff and the gradient shrinks.
    """
    prob = _Problem(maps, sources, target, weights)
    alpha = _target_start(target, box) if init is None else _alpha_of(init, [])
    if alpha.size != prob.d1 + prob.d2:
        raise DimensionError("initial value has the wrong length")
    alpha = np.clip(alpha, -box, box)
    f, g = prob.value_grad(alpha)
    B = _posdef(prob.fisher(alpha))
    fresh = True
    it = 0
    message = "max iterations reached"
    while it < max_iter:
        gmax = float(np.max(np.abs(g)))
        if gmax <= tol:
            message = "gradient tolerance reached"
            break
        it += 1
        d = np.linalg.solve(B, g)
        slope = float(g @ d)
        if not slope > 0:
            B, fresh = _posdef(prob.fisher(alpha)), True
            d = np.linalg.solve(B, g)
            slope = float(g @ d)
        accepted = False
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = alpha + t * d
            if np.max(np.abs(cand)) <= box:
                try:
                    # trial points far out may overflow; they are rejected below
                    with np.errstate(over="ignore", invalid="ignore"):
                        f_c, g_c = prob.value_grad(cand)
                except (ValueError, ArithmeticError, np.linalg.LinAlgError):
                    f_c, g_c = -np.inf, None
                if np.isfinite(f_c):
                    if f_c >= f + ARMIJO_C1 * t * slope:
                        accepted = True
                        break
                    tie = abs(f_c - f) <= 64 * _EPS * (1.0 + abs(f))
                    if tie and np.max(np.abs(g_c)) < gmax:
                        accepted = True
                        break
            t *= 0.5
        if not accepted:
            if not fresh:
                B, fresh = _posdef(prob.fisher(alpha)), True
                continue
            raise LineSearchError(
                f"no acceptable step after {MAX_HALVINGS} halvings (gradient {gmax:.3g})"
            )
        step = cand - alpha
        yk = g - g_c  # gradient change of the negated objective
        alpha, f, g = cand, f_c, g_c
        Bs = B @ step
        sBs = float(step @ Bs)
        sy = float(step @ yk)
        if sBs > 0:
            if sy < 0.2 * sBs:
                th = 0.8 * sBs / (sBs - sy)
                yk = th * yk + (1.0 - th) * Bs
                sy = float(step @ yk)
            if sy > 0:
                B = B - np.outer(Bs, Bs) / sBs + np.outer(yk, yk) / sy
                B = 0.5 * (B + B.T)
        fresh = False
    gmax = float(np.max(np.abs(g)))
    cov = _safe_inverse(prob.fisher(alpha))
    gamma, theta = prob.split(alpha)
    return TransferFit(
        gamma=gamma.copy(),
        theta=theta.copy(),
        covariance=cov,
        weights=weights,
        loglik=f,
        iterations=it,
        converged=gmax <= tol,
        grad_norm=gmax,
        message=message,
    )


def closed_form_linear(
    ab_list: Sequence[tuple[ArrayLike, ArrayLike]],
    sources: Sequence[SourceSpec],
    target: TargetSpec,
    weights: Weights,
) -> TransferFit:
    """Weighted normal equations for all-Gaussian models with linear maps s_j = a_j gamma + b_j theta.

    Solves (sum_j w_j M_j' X_j' X_j M_j + w_Q W'W) alpha = sum_j w_j M_j' X_j' y_j + w_Q W'y
    with M_j = [a_j | b_j]; a vector a_j stands for a diagonal matrix.
    """
    t_fam, tdata = target
    fams = [ExponentialFamily.parse(f) for f, _ in sources] + [ExponentialFamily.parse(t_fam)]
    if any(f is not ExponentialFamily.GAUSSIAN for f in fams):
        raise DomainError("closed form requires Gaussian families throughout")
    if len(ab_list) != len(sources):
        raise DimensionError("one (a, b) pair per source is required")
    W = tdata.W
    lhs = weights.w_target * W.T @ W
    rhs = weights.w_target * W.T @ tdata.y
    maps = []
    for w, (a, b), (_, data) in zip(weights.w_sources, ab_list, sources):
        m = LinearLinearMap(a, b)
        maps.append(m)
        if w == 0.0:
            continue
        XM = data.X @ m._jac
        lhs += w * XM.T @ XM
        rhs += w * XM.T @ data.y
    if np.linalg.cond(lhs) > 1e14:
        raise RankDeficientError("normal equations are singular")
    alpha = np.linalg.solve(lhs, rhs)
    prob = _Problem(maps, sources, target, weights)
    return TransferFit(
        gamma=alpha[: tdata.d1].copy(),
        theta=alpha[tdata.d1:].copy(),
        covariance=_safe_inverse(0.5 * (lhs + lhs.T)),
        weights=weights,
        loglik=prob.value(alpha),
        iterations=0,
        converged=True,
        grad_norm=float(np.max(np.abs(prob.gradient(alpha)))),
        message="closed form",
    )


def estimate_weights(source_fits: Sequence[GlmFit], target_fit: GlmFit) -> Weights:
    """Inverse residual variances of every model, normalized jointly."""
    rv = np.array([f.residual_variance for f in source_fits] + [target_fit.residual_variance], float)
    if np.any(~np.isfinite(rv)) or np.any(rv <= 1e-12):
        raise ValueError("residual variance is zero; the fit is degenerate")
    inv = 1.0 / rv
    w = inv / inv.sum()
    ws = w[:-1]
    return Weights(ws, 1.0 - ws.sum())


# ---------------------------------------------------------------- theory


@dataclass(frozen=True)
class TheoreticalVariance:
    """Univariate asymptotic precisions with unit noise and equal weights 1/2."""

    a: float
    tau: float
    rho: float
    phi: float
    v_gamma: float
    v_theta: float
    c1: bool


def phi_gain(a: float, tau: float, rho: float) -> float:
    """a^2 (1 - rho^2 (1 + tau/a^2)^2 / (rho^2 + tau/a^2))."""
    if a == 0:
        raise ZeroDivisionError("a must be nonzero")
    q = tau / (a * a)
    den = rho * rho + q
    if den == 0:
        raise ZeroDivisionError("rho^2 + tau/a^2 vanishes")
    return a * a * (1.0 - rho * rho * (1.0 + q) ** 2 / den)


def theoretical_variance_linear(a: float, rho: float, n_P: int, n_Q: int) -> TheoreticalVariance:
    """Precision of gamma-hat, n_P phi + n_Q, and of theta-hat, n_Q (1 - rho).

    Both formulas assume unit noise variance in each model and equal weights
    of 1/2. Precision here means the inverse asymptotic variance. The theta
    formula is the first-order approximation; the exact precision of the
    weighted estimator under this design is n_Q (1 - rho^2), see
    `exact_precision_linear`.
    """
    if abs(rho) >= 1 / math.sqrt(2):
        raise ValueError("|rho| must be below 1/sqrt(2)")
    tau = n_Q / n_P
    phi = phi_gain(a, tau, rho)
    c1 = a * a > tau * rho * rho / (1.0 - 2.0 * rho * rho)
    return TheoreticalVariance(a, tau, rho, phi, n_P * phi + n_Q, n_Q * (1.0 - rho), c1)


def exact_precision_linear(a: float, rho: float, n_P: int, n_Q: int) -> tuple[float, float]:
    """Inverse diagonal of (n_P [a, a rho]'[a, a rho] + n_Q [[1, rho], [rho, 1]])^-1."""
    M = n_P * np.outer([a, a * rho], [a, a * rho]) + n_Q * np.array([[1.0, rho], [rho, 1.0]])
    cov = np.linalg.inv(M)
    return 1.0 / cov[0, 0], 1.0 / cov[1, 1]


@dataclass(frozen=True)
class GainConditions:
    c1: bool | None
    c2: bool
    c3: bool
    regime: str
    note: str = ""


def check_transfer_gain_conditions(a: float, rho: float, tau: float) -> GainConditions:
    c2 = rho != 0 and tau != 0
    c3 = rho == 0 and tau >= 0
    if abs(rho) >= 1 / math.sqrt(2):
        c1 = None
        note = "C1 undefined for |rho| >= 1/sqrt(2)"
    else:
        c1 = a * a > tau * rho * rho / (1.0 - 2.0 * rho * rho)
        note = ""
    if c1 and (c2 or c3):
        regime = "improvable by n_P: precision grows with n_P + n_Q"
    else:
        regime = "target rate: precision is a multiple of n_Q"
    return GainConditions(c1, c2, c3, regime, note)


@dataclass(frozen=True)
class FirstComponentVariance:
    v_gamma1: float
    r: float
    D: NDArray
    A: NDArray
    c4: bool
    c5: bool


def information_blocks(
    tmap: TransferMap,
    source_family: ExponentialFamily,
    source: SampleSet,
    target_family: ExponentialFamily,
    target: TargetSample,
    alpha: ArrayLike,
) -> tuple[NDArray, NDArray, NDArray]:
    """(Sigma^P, Sigma^Q, s') from model variances at the fitted linear predictors."""
    alpha = np.asarray(alpha, float)
    s = tmap.evaluate_alpha(alpha)
    vp = cumulant_d2(source_family, source.X @ s)
    W = target.W
    vq = cumulant_d2(target_family, W @ alpha)
    sig_p = source.X.T @ (source.X * vp[:, None]) / source.n
    sig_q = W.T @ (W * vq[:, None]) / target.n
    return sig_p, sig_q, tmap.jacobian_alpha(alpha)


def variance_first_component(
    sigma_p: ArrayLike, sigma_q: ArrayLike, jac: ArrayLike, n_P: int, n_Q: int
) -> FirstComponentVariance:
    """Asymptotic precision of the first target coefficient.

    v = n_P s1' Sp s1 + n_Q sq11 - n_P r with
    r = (s1' Sp s_(-1) + tau sq12') (A + tau Sq22)^-1 (s_(-1)' Sp s1 + tau sq12),
    A = s_(-1)' Sp s_(-1), tau = n_Q / n_P. Equal weights 1/2 are assumed.
    """
    Sp = np.atleast_2d(np.asarray(sigma_p, float))
    Sq = np.atleast_2d(np.asarray(sigma_q, float))
    J = np.atleast_2d(np.asarray(jac, float))
    tau = n_Q / n_P
    Bm = J.T @ Sp @ J
    A = Bm[1:, 1:]
    cross = Bm[1:, 0] + tau * Sq[1:, 0]
    M = A + tau * Sq[1:, 1:]
    if M.size and np.linalg.cond(M) > 1e14:
        raise RankDeficientError("A + tau Sigma^Q_22 is singular")
    r = float(cross @ np.linalg.solve(M, cross)) if M.size else 0.0
    v = n_P * Bm[0, 0] + n_Q * Sq[0, 0] - n_P * r
    A_pinv = np.linalg.pinv(A) if A.size else A
    if A.size:
        S22 = Sq[1:, 1:]
        D = A_pinv - tau * A_pinv @ np.linalg.inv(np.linalg.inv(S22) + tau * A_pinv) @ A_pinv
    else:
        D = A
    c4 = bool(np.any(J[:, 0] != 0))
    quad = float(Bm[0, 1:] @ A_pinv @ Bm[1:, 0]) if A.size else 0.0
    c5 = bool(tau != 0 or quad > 0)
    return FirstComponentVariance(float(v), r, D, A, c4, c5)


# ---------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    lower: NDArray
    upper: NDArray
    estimates: NDArray
    failures: int
    level: float


def _resample(strata: Sequence, rng: np.random.Generator) -> list:
    out = []
    for s in strata:
        idx = rng.integers(0, s.n, size=s.n)
        out.append(s.take(idx))
    return out


def _boot_one(args: tuple) -> NDArray | None:
    fit_fn, strata, seed, b = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
    try:
        est = np.asarray(fit_fn(_resample(strata, rng)), dtype=float)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError):
        return None
    return est if np.all(np.isfinite(est)) else None


def bootstrap_ci(
    fit_fn: Callable[[list], NDArray],
    strata: Sequence,
    level: float = 0.9,
    B: int = 400,
    seed: int = 0,
    workers: int = 1,
) -> BootstrapResult:
    """Percentile intervals from a pairs bootstrap resampling each sample within itself.

    Resample b draws from its own stream spawned from `seed`, so results do
    not depend on the number of workers.
    """
    if B < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    jobs = [(fit_fn, list(strata), seed, b) for b in range(B)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_boot_one, jobs, chunksize=max(1, B // (4 * workers))))
    else:
        results = [_boot_one(j) for j in jobs]
    good = [r for r in results if r is not None]
    failures = B - len(good)
    if failures > 0.1 * B:
        raise UnstableBootstrapError(f"{failures} of {B} bootstrap fits failed")
    est = np.vstack(good)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(est, [tail, 100.0 - tail], axis=0)
    return BootstrapResult(lo, hi, est, failures, level)


# ---------------------------------------------------------------- shrinkage demo


@dataclass(frozen=True)
class JamesSteinRisk:
    ordinary: float
    shrunk: float
    k: int
    c: float
    replications: int


def james_stein_demo(
    k: int, theta: ArrayLike, c: float, replications: int, seed: int, chunk: int = 50_000
) -> JamesSteinRisk:
    """Monte Carlo risks of X and of (1 - c / |X|^2) X for X ~ N(theta, I_k)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if k < 3 or theta.size != k:
        raise ValueError("need k >= 3 and theta of length k")
    if not 0 < c < 2 * (k - 2):
        raise ValueError("c must lie in (0, 2(k - 2))")
    rng = np.random.default_rng(seed)
    ord_sum = js_sum = 0.0
    done = 0
    while done < replications:
        m = min(chunk, replications - done)
        X = theta + rng.standard_normal((m, k))
        s2 = np.sum(X * X, axis=1)
        js = (1.0 - c / s2)[:, None] * X
        ord_sum += float(np.sum((X - theta) ** 2))
        js_sum += float(np.sum((js - theta) ** 2))
        done += m
    return JamesSteinRisk(ord_sum / replications, js_sum / replications, k, c, replications)
