"""
Discrepancy functions and their minimisation.

The ML (Wishart) and GLS discrepancies are minimised with a BFGS
inverse-Hessian update and an Armijo backtracking line search.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .model import CfaModel, PSI, LAMBDA, PHI, MATRICES, unpack, implied_covariance, \
    degrees_of_freedom, independence_model

ML = "ML"
GLS = "GLS"

GRAD_TOL = 1e-6
FTOL = 1e-10
MAX_ITER = 500
VARIANCE_FLOOR = 1e-4
ARMIJO_C = 1e-4
MAX_BACKTRACK = 60


class SingularityError(LinAlgError):
    """A matrix that must be positive definite is not.

    ``which`` names the offending matrix ("S", "Sigma", ...).
    """

    def __init__(self, which: str, message: str = ""):
        self.which = which
        super().__init__(message or f"{which} is not positive definite")


@dataclass(frozen=True, eq=False)
class SampleMoments:
    S: np.ndarray
    N: int
    data: Optional[np.ndarray] = None

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("S must be square")
        if not np.array_equal(S, S.T):
            raise ValueError("S must be symmetric")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        object.__setattr__(self, "S", S)

    @property
    def n(self) -> int:
        return self.N - 1

    @property
    def p(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True, eq=False)
class FitSolution:
    theta_hat: np.ndarray
    f_min: float
    converged: bool
    iterations: int
    gradient_norm: float
    method: str
    model: CfaModel

    @property
    def sigma(self) -> np.ndarray:
        return implied_covariance(self.model, self.theta_hat)

    @property
    def df(self) -> int:
        return degrees_of_freedom(self.model)


def _chol(A, which):
    try:
        return cho_factor(A, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        raise SingularityError(which) from None


def _logdet(factor):
    return 2.0 * np.sum(np.log(np.diag(factor[0])))


def f_ml(S, Sigma) -> float:
    """Wishart discrepancy log|Sigma| - log|S| + tr(S Sigma^-1) - p."""
    S = np.asarray(S, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if S.shape != Sigma.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {Sigma.shape}")
    fs = _chol(S, "S")
    fsig = _chol(Sigma, "Sigma")
    p = S.shape[0]
    return float(_logdet(fsig) - _logdet(fs) + np.trace(cho_solve(fsig, S)) - p)


def f_gls(S, Sigma, V) -> float:
    """Quadratic-form discrepancy 0.5 tr([(S - Sigma) V]^2)."""
    S, Sigma, V = (np.asarray(a, dtype=float) for a in (S, Sigma, V))
    if not (S.shape == Sigma.shape == V.shape):
        raise ValueError("S, Sigma and V must have the same shape")
    R = (S - Sigma) @ V
    return float(0.5 * np.sum(R * R.T))


def _gradient_from_weight(model: CfaModel, theta, M) -> np.ndarray:
    """Gradient components tr(M dSigma/dtheta_k) for symmetric M."""
    Lambda, Phi, _ = unpack(model, theta)
    g = np.zeros(model.q)
    grads = {
        LAMBDA: 2.0 * M @ Lambda @ Phi,
        PHI: Lambda.T @ M @ Lambda,
        PSI: M,
    }
    for name in MATRICES:
        _, rows, cols, idx = model._index[name]
        if idx.size == 0:
            continue
        vals = grads[name][rows, cols]
        if name != LAMBDA:
            vals = np.where(rows == cols, vals, 2.0 * vals)
        g[idx] = vals
    return g


def gradient_f_ml(model: CfaModel, theta, S) -> np.ndarray:
    """Analytic gradient of the ML discrepancy with respect to theta."""
    theta = np.asarray(theta, dtype=float)
    if model.q == 0:
        return np.zeros(0)
    Sigma = implied_covariance(model, theta)
    fac = _chol(Sigma, "Sigma")
    Sinv = cho_solve(fac, np.eye(model.p))
    M = Sinv - Sinv @ S @ Sinv
    return _gradient_from_weight(model, theta, 0.5 * (M + M.T))


def _gradient_f_gls(model, theta, S, V):
    Sigma = implied_covariance(model, theta)
    M = -V @ (S - Sigma) @ V
    return _gradient_from_weight(model, theta, 0.5 * (M + M.T))


def starting_values(model: CfaModel, S) -> np.ndarray:
    """Deterministic start: declared loading starts, zero factor covariances,
    declared (else unit) factor variances and half the observed variance for
    free unique variances."""
    S = np.asarray(S, dtype=float)
    theta = np.zeros(model.q)
    for k, pos in enumerate(model.positions()):
        if pos.matrix == LAMBDA:
            theta[k] = model.entry(pos).start
        elif pos.matrix == PSI and pos.row == pos.col:
            theta[k] = 0.5 * S[pos.row, pos.row]
        elif pos.matrix == PHI and pos.row == pos.col:
            start = model.entry(pos).start
            theta[k] = start if start > 0 else 1.0
    return theta


def _floored_mask(model):
    mask = np.zeros(model.q, dtype=bool)
    _, rows, cols, idx = model._index[PSI]
    mask[idx[rows == cols]] = True
    return mask


def _minimize(fun, grad, x0, floor_mask):
    """BFGS with backtracking Armijo search and a lower bound on masked entries.

    ``fun`` returns +inf where the objective is undefined; such trial points
    are treated like an Armijo failure and the step is halved.
    """
    x = np.maximum(x0, np.where(floor_mask, VARIANCE_FLOOR, -np.inf))
    f = fun(x)
    if not np.isfinite(f):
        raise SingularityError("Sigma", "starting values give a non positive definite Sigma")
    g = grad(x)
    n = x.size
    H = np.eye(n)

    def projected_norm(x, g):
        pg = np.where(floor_mask & (x <= VARIANCE_FLOOR) & (g > 0), 0.0, g)
        return float(np.max(np.abs(pg))) if n else 0.0

    gnorm = projected_norm(x, g)
    it = 0
    converged = gnorm <= GRAD_TOL
    first = True
    while not converged and it < MAX_ITER:
        it += 1
        d = -H @ g
        slope = g @ d
        if slope >= 0:
            H = np.eye(n)
            d = -g
            slope = g @ d
        step = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACK):
            xt = x + step * d
            xt = np.where(floor_mask, np.maximum(xt, VARIANCE_FLOOR), xt)
            ft = fun(xt)
            if np.isfinite(ft) and ft <= f + ARMIJO_C * g @ (xt - x):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        gt = grad(xt)
        s = xt - x
        y = gt - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                H = np.eye(n) * (sy / (y @ y))
                first = False
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) \
                + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
        fchange = abs(f - ft)
        x, f, g = xt, ft, gt
        gnorm = projected_norm(x, g)
        if gnorm <= GRAD_TOL:
            converged = True
        elif fchange <= FTOL * abs(f):
            converged = True
            break
    return x, f, converged, it, gnorm


def fit(model: CfaModel, moments: SampleMoments, method: str = ML, start=None,
        V=None) -> FitSolution:
    """Minimise the ML or GLS discrepancy over the model's free parameters.

    Non-convergence is reported through ``FitSolution.converged`` rather than
    raised.  ``V`` defaults to S^-1 for GLS.
    """
    S = moments.S
    if S.shape != (model.p, model.p):
        raise ValueError(f"S is {S.shape}, model has p = {model.p}")
    if degrees_of_freedom(model) < 0:
        raise ValueError("model is over-parameterised")
    fs = _chol(S, "S")
    logdet_s = _logdet(fs)
    p = model.p

    if method == ML:
        def fun(theta):
            Sigma = implied_covariance(model, theta)
            try:
                fac = cho_factor(Sigma, lower=True)
            except LinAlgError:
                return np.inf
            return _logdet(fac) - logdet_s + np.trace(cho_solve(fac, S)) - p

        def grad(theta):
            return gradient_f_ml(model, theta, S)
    elif method == GLS:
        if V is None:
            V = cho_solve(fs, np.eye(p))
            V = 0.5 * (V + V.T)

        def fun(theta):
            Sigma = implied_covariance(model, theta)
            try:
                np.linalg.cholesky(Sigma)
            except np.linalg.LinAlgError:
                return np.inf
            return f_gls(S, Sigma, V)

        def grad(theta):
            return _gradient_f_gls(model, theta, S, V)
    else:
        raise ValueError(f"unknown method {method!r}")

    x0 = starting_values(model, S) if start is None else np.asarray(start, dtype=float)
    theta, f, converged, it, gnorm = _minimize(fun, grad, x0, _floored_mask(model))
    return FitSolution(theta_hat=theta, f_min=float(f), converged=bool(converged),
                       iterations=it, gradient_norm=gnorm, method=method, model=model)


def fit_independence(moments: SampleMoments) -> FitSolution:
    """Closed-form ML fit of the diagonal (independence) baseline."""
    S = moments.S
    fs = _chol(S, "S")
    d = np.diag(S).copy()
    f = float(np.sum(np.log(d)) - _logdet(fs))
    return FitSolution(theta_hat=d, f_min=max(f, 0.0), converged=True, iterations=0,
                       gradient_norm=0.0, method=ML, model=independence_model(S.shape[0]))
