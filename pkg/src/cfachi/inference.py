"""
Test statistics, modification indices and fit indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special
from scipy.linalg import cho_solve

from .estimation import FitSolution, SampleMoments, SingularityError, _chol
from .model import (LAMBDA, PSI, CfaModel, Fixed, ModelError, Position, degrees_of_freedom,
                    entry_derivative, implied_covariance, sigma_jacobian, unpack, vech_indices)

KIND_ML = "ML"
KIND_RLS = "RLS"
KIND_SB = "SB"

CFI_CUTOFF = 0.95
TLI_CUTOFF = 0.95
RMSEA_CUTOFF = 0.06
MAX_LM_CANDIDATES = 200


class MissingDataError(ValueError):
    pass


class UndefinedBaselineError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class TestStatistic:
    value: float
    df: int
    p_value: float
    kind: str

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class FitIndexSet:
    nfi: float
    cfi: float
    tli: float
    rmsea: float
    baseline_T: float
    baseline_df: int
    verdict_cfi: bool
    verdict_tli: bool
    verdict_rmsea: bool


@dataclass(frozen=True)
class LmCandidate:
    target: Position
    score: float
    p_value: float
    expected_drop: float
    error: Optional[str] = None


def chi_square_sf(x: float, df: int) -> float:
    """Upper tail P(chi2_df > x) via the regularized upper incomplete gamma."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if not x >= 0:
        raise ValueError(f"chi-square statistic must be >= 0, got {x}")
    return float(special.gammaincc(0.5 * df, 0.5 * x))


def _stat(value, df, kind):
    value = max(float(value), 0.0)
    # A saturated model (df = 0) reproduces S and cannot be rejected.
    p = chi_square_sf(value, df) if df >= 1 else 1.0
    return TestStatistic(value=value, df=int(df), p_value=p, kind=kind)


def t_ml(f_min: float, N: int, df: int) -> TestStatistic:
    return _stat((N - 1) * f_min, df, KIND_ML)


def t_rls(S, Sigma_ml, N: int, df: int) -> TestStatistic:
    """Reweighted least squares statistic (n/2) tr{[(S - Sigma) Sigma^-1]^2}."""
    S = np.asarray(S, dtype=float)
    fac = _chol(np.asarray(Sigma_ml, dtype=float), "Sigma")
    R = cho_solve(fac, (S - Sigma_ml).T).T  # (S - Sigma) Sigma^-1
    value = 0.5 * (N - 1) * np.sum(R * R.T)
    return _stat(value, df, KIND_RLS)


# -- Satorra-Bentler --------------------------------------------------------

def duplication_matrix(p: int) -> np.ndarray:
    """D with vec(A) = D vech(A) for symmetric A, matching ``vech_indices``."""
    rows, cols = vech_indices(p)
    D = np.zeros((p * p, rows.size))
    for k, (i, j) in enumerate(zip(rows, cols)):
        D[i * p + j, k] = 1.0
        D[j * p + i, k] = 1.0
    return D


def normal_weight(Sigma) -> np.ndarray:
    """Normal-theory weight 0.5 D'(Sigma^-1 kron Sigma^-1) D on vech."""
    p = Sigma.shape[0]
    Sinv = cho_solve(_chol(Sigma, "Sigma"), np.eye(p))
    D = duplication_matrix(p)
    W = 0.5 * D.T @ np.kron(Sinv, Sinv) @ D
    return 0.5 * (W + W.T)


def fourth_moment_matrix(data) -> np.ndarray:
    """Covariance (divisor N) of vech((x_i - xbar)(x_i - xbar)')."""
    X = np.asarray(data, dtype=float)
    Z = X - X.mean(axis=0)
    rows, cols = vech_indices(X.shape[1])
    V = Z[:, rows] * Z[:, cols]
    V = V - V.mean(axis=0)
    G = V.T @ V / X.shape[0]
    return 0.5 * (G + G.T)


def sb_scaling(model: CfaModel, theta_hat, moments: SampleMoments) -> float:
    """Mean-scaling factor tr(U Gamma)/df."""
    if moments.data is None:
        raise MissingDataError("the scaled statistic needs the raw data matrix")
    df = degrees_of_freedom(model)
    if df < 1:
        raise ValueError("scaling needs df >= 1")
    Sigma = implied_covariance(model, theta_hat)
    W = normal_weight(Sigma)
    Delta = sigma_jacobian(model, theta_hat)
    WD = W @ Delta
    info = Delta.T @ WD
    try:
        fac = _chol(info, "Delta'W Delta")
    except SingularityError:
        raise np.linalg.LinAlgError("Delta'W Delta is rank deficient") from None
    U = W - WD @ cho_solve(fac, WD.T)
    Gamma = fourth_moment_matrix(moments.data)
    return float(np.sum(U * Gamma.T)) / df


def scale_statistic(stat: TestStatistic, c: float) -> TestStatistic:
    return _stat(stat.value / c, stat.df, KIND_SB)


def satorra_bentler(stat: TestStatistic, model: CfaModel, theta_hat,
                    moments: SampleMoments) -> TestStatistic:
    return scale_statistic(stat, sb_scaling(model, theta_hat, moments))


# -- Lagrange multiplier ----------------------------------------------------

def default_candidates(model: CfaModel) -> list:
    """Fixed cross-loadings then fixed unique covariances, capped."""
    out = []
    for i in range(model.p):
        for j in range(model.m):
            if isinstance(model.lambda_pattern[i, j], Fixed):
                out.append(Position(LAMBDA, i, j))
    for i in range(model.p):
        for j in range(i):
            if isinstance(model.psi_pattern[i, j], Fixed):
                out.append(Position(PSI, i, j))
    return out[:MAX_LM_CANDIDATES]


def lm_test(model: CfaModel, theta_hat, moments: SampleMoments,
            candidates: Sequence[Position] | None = None) -> list:
    """Univariate score tests for freeing each fixed candidate.

    The candidate enters at its fixed value, so Sigma is unchanged; the
    statistic is (n/4) g_c^2 / [A_cc - A_c. A^-1 A_.c], where g is the
    gradient of F_ML and A = Delta' W Delta is the normal-theory information
    per observation (W including its factor 1/2).  This equals the squared
    log-likelihood score over the Schur complement of the Fisher
    information.
    """
    if candidates is None:
        candidates = default_candidates(model)
    candidates = [Position(*c).normalized() for c in candidates]
    n = moments.n
    S = moments.S
    theta_hat = np.asarray(theta_hat, dtype=float)

    Lambda, Phi, _ = unpack(model, theta_hat)
    Sigma = implied_covariance(model, theta_hat)
    Sinv = cho_solve(_chol(Sigma, "Sigma"), np.eye(model.p))
    M = Sinv - Sinv @ S @ Sinv
    W = normal_weight(Sigma)
    rows, cols = vech_indices(model.p)
    base_delta = sigma_jacobian(model, theta_hat)
    A = base_delta.T @ W @ base_delta
    A_inv = np.linalg.inv(A)

    results = []
    for pos in candidates:
        if not isinstance(model.entry(pos), Fixed):
            raise ModelError(f"candidate {pos} is not fixed in the model")
        dsig = entry_derivative(Lambda, Phi, pos)
        g_c = np.sum(M * dsig)
        d_c = dsig[rows, cols]
        Wd = W @ d_c
        a_cc = d_c @ Wd
        a_ct = base_delta.T @ Wd
        schur = a_cc - a_ct @ A_inv @ a_ct
        if not schur > 1e-10 * max(a_cc, 1e-300):
            results.append(LmCandidate(pos, float("nan"), float("nan"), float("nan"),
                                       error="singular information for this candidate"))
            continue
        score = max(0.25 * n * g_c * g_c / schur, 0.0)
        results.append(LmCandidate(pos, score, chi_square_sf(score, 1), score))
    ok = sorted((r for r in results if r.error is None), key=lambda r: -r.score)
    return ok + [r for r in results if r.error is not None]


# -- fit indices ------------------------------------------------------------

def nfi(T_i: float, T_k: float) -> float:
    if T_i == 0:
        raise UndefinedBaselineError("NFI undefined for a zero baseline statistic")
    return (T_i - T_k) / T_i


def cfi(T_k: float, df_k: int, T_i: float, df_i: int) -> float:
    lam_k = max(T_k - df_k, 0.0)
    lam_i = max(T_i - df_i, 0.0, lam_k)
    if lam_i == 0:
        return 1.0
    return min(max(1.0 - lam_k / lam_i, 0.0), 1.0)


def tli(T_k: float, df_k: int, T_i: float, df_i: int) -> float:
    """1 - (T_k/df_k)/(T_i/df_i), uncapped."""
    if df_k < 1 or df_i < 1:
        raise ZeroDivisionError("TLI needs df_k, df_i >= 1")
    if T_i == 0:
        raise UndefinedBaselineError("TLI undefined for a zero baseline statistic")
    return 1.0 - (T_k / df_k) / (T_i / df_i)


def tli_conventional(T_k: float, df_k: int, T_i: float, df_i: int) -> float:
    """Tucker-Lewis index in its usual form (T_i/df_i - T_k/df_k)/(T_i/df_i - 1)."""
    ri = T_i / df_i
    return (ri - T_k / df_k) / (ri - 1.0)


def rmsea(T_k: float, df_k: int, n: int) -> float:
    if df_k < 1:
        # Saturated model: no misfit to spread over degrees of freedom.
        return 0.0
    return float(np.sqrt(max((T_k - df_k) / (n * df_k), 0.0)))


def indices_from_statistics(T_k: float, df_k: int, T_i: float, df_i: int, n: int) -> FitIndexSet:
    fi_nfi = nfi(T_i, T_k)
    fi_cfi = cfi(T_k, df_k, T_i, df_i)
    fi_tli = tli(T_k, df_k, T_i, df_i) if df_k >= 1 else 1.0
    fi_rmsea = rmsea(T_k, df_k, n)
    return FitIndexSet(nfi=fi_nfi, cfi=fi_cfi, tli=fi_tli, rmsea=fi_rmsea,
                       baseline_T=T_i, baseline_df=df_i,
                       verdict_cfi=fi_cfi > CFI_CUTOFF, verdict_tli=fi_tli > TLI_CUTOFF,
                       verdict_rmsea=fi_rmsea < RMSEA_CUTOFF)


def statistic(kind: str, sol: FitSolution, moments: SampleMoments) -> TestStatistic:
    """Statistic of the given kind for an ML solution."""
    df = sol.df
    base = t_ml(sol.f_min, moments.N, df)
    if kind == KIND_ML:
        return base
    if kind == KIND_RLS:
        return t_rls(moments.S, sol.sigma, moments.N, df)
    if kind == KIND_SB:
        return satorra_bentler(base, sol.model, sol.theta_hat, moments)
    raise ValueError(f"unknown statistic kind {kind!r}")


def evaluate_fit(fit: FitSolution, baseline: FitSolution, moments: SampleMoments,
                 model_df: int | None = None, baseline_df: int | None = None,
                 kind: str = KIND_ML) -> FitIndexSet:
    """Fit indices with the baseline statistic computed by the same estimator."""
    model_df = fit.df if model_df is None else model_df
    baseline_df = baseline.df if baseline_df is None else baseline_df
    T_k = statistic(kind, fit, moments).value
    T_i = statistic(kind, baseline, moments).value
    return indices_from_statistics(T_k, model_df, T_i, baseline_df, moments.n)
