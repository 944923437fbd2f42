"""
Sampling from the population factor model.

Normal data are X_i = Lambda xi_i + eps_i with xi_i = L_Phi z and
eps_i = L_Psi z'.  Elliptical data scale both by one radius per
observation, r_i = sqrt(3 / chi2_5), so E[r^2] = 1 and the covariance is
unchanged while the tails get heavier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, LinAlgError

from .estimation import SampleMoments, SingularityError

NORMAL = "normal"
ELLIPTICAL = "elliptical"

ELLIPTICAL_CHISQ_DF = 5
ELLIPTICAL_SCALE = 3.0


@dataclass(frozen=True, eq=False)
class PopulationSpec:
    Lambda: np.ndarray
    Phi: np.ndarray
    Psi: np.ndarray
    distribution: str = NORMAL

    def __post_init__(self):
        if self.distribution not in (NORMAL, ELLIPTICAL):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        matrix_sqrt_factor(self.sigma)

    @property
    def sigma(self) -> np.ndarray:
        s = self.Lambda @ self.Phi @ self.Lambda.T + self.Psi
        return 0.5 * (s + s.T)

    @property
    def p(self) -> int:
        return self.Lambda.shape[0]

    def with_distribution(self, distribution: str) -> "PopulationSpec":
        return PopulationSpec(self.Lambda, self.Phi, self.Psi, distribution)


class RngStream:
    """Seeded stream addressed by (master_seed, scenario, N index, replication).

    Backed by numpy's PCG64 seeded through SeedSequence; normals come from
    numpy's ziggurat sampler.  Both are fixed algorithms, so a given address
    yields the same draws on every platform for a given numpy release.
    """

    def __init__(self, master_seed: int, *coords: int):
        self.master_seed = int(master_seed)
        self.coords = tuple(int(c) for c in coords)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.coords)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def standard_normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def chisquare(self, df: int, size: int) -> np.ndarray:
        """Chi-square draws as sums of ``df`` squared standard normals."""
        z = self.standard_normal((size, df))
        return np.sum(z * z, axis=1)


def matrix_sqrt_factor(A) -> np.ndarray:
    """Lower Cholesky factor L with L L' = A."""
    try:
        return cholesky(np.asarray(A, dtype=float), lower=True)
    except (LinAlgError, ValueError):
        raise SingularityError("A") from None


def generate_sample(spec: PopulationSpec, N: int, rng: RngStream) -> np.ndarray:
    """Draw an N x p data matrix from ``spec``."""
    if N < 1:
        raise ValueError("N must be positive")
    m = spec.Phi.shape[0]
    p = spec.p
    L_phi = matrix_sqrt_factor(spec.Phi)
    L_psi = matrix_sqrt_factor(spec.Psi)
    xi = rng.standard_normal((N, m)) @ L_phi.T
    eps = rng.standard_normal((N, p)) @ L_psi.T
    if spec.distribution == ELLIPTICAL:
        r = np.sqrt(ELLIPTICAL_SCALE / rng.chisquare(ELLIPTICAL_CHISQ_DF, N))
        xi *= r[:, None]
        eps *= r[:, None]
    return xi @ spec.Lambda.T + eps


def sample_covariance(data) -> SampleMoments:
    X = np.asarray(data, dtype=float)
    N = X.shape[0]
    if X.ndim != 2 or N < 2:
        raise ValueError("need an N x p matrix with N >= 2")
    Z = X - X.mean(axis=0)
    S = Z.T @ Z / (N - 1)
    S = 0.5 * (S + S.T)
    return SampleMoments(S=S, N=N, data=X)


def write_csv(path, names, data) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in np.asarray(data, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def read_csv(path):
    """Return (names, data) from a header-plus-rows numeric CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise ValueError(f"{path}:{lineno}: expected {len(names)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    return names, np.array(rows, dtype=float).reshape(-1, len(names))
