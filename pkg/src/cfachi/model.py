"""
Patterned CFA models.

A model is three parameter grids (loadings, factor covariances, unique
covariances) whose entries are either fixed constants or free parameters.
The free entries, in index order, form the parameter vector ``theta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

LAMBDA = "lambda"
PHI = "phi"
PSI = "psi"
MATRICES = (LAMBDA, PHI, PSI)


class ModelError(ValueError):
    """Raised for malformed or non-identified model specifications."""


class DimensionError(ModelError):
    pass


@dataclass(frozen=True)
class Fixed:
    value: float


@dataclass(frozen=True)
class Free:
    index: int
    start: float = 0.0


ParamEntry = Union[Fixed, Free]


class Position(NamedTuple):
    """Location of one entry: matrix name plus (row, col).

    Symmetric matrices are normalised so that ``row >= col``.
    """

    matrix: str
    row: int
    col: int

    def normalized(self) -> "Position":
        if self.matrix in (PHI, PSI) and self.col > self.row:
            return Position(self.matrix, self.col, self.row)
        return self


def _pattern_grid(entries, shape, symmetric):
    grid = np.empty(shape, dtype=object)
    grid.fill(Fixed(0.0))
    for (i, j), entry in entries.items():
        grid[i, j] = entry
        if symmetric:
            grid[j, i] = entry
    return grid


@dataclass(frozen=True, eq=False)
class CfaModel:
    """Covariance structure Sigma = Lambda Phi Lambda' + Psi.

    Parameters
    ----------
    lambda_pattern : p x m object array of ParamEntry
    phi_pattern : m x m symmetric object array of ParamEntry
    psi_pattern : p x p symmetric object array of ParamEntry
    observed, factors : optional names used for reporting and file IO
    """

    lambda_pattern: np.ndarray
    phi_pattern: np.ndarray
    psi_pattern: np.ndarray
    observed: tuple = ()
    factors: tuple = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lam, phi, psi = self.lambda_pattern, self.phi_pattern, self.psi_pattern
        p, m = lam.shape
        if phi.shape != (m, m) or psi.shape != (p, p):
            raise DimensionError(
                f"pattern shapes disagree: lambda {lam.shape}, phi {phi.shape}, psi {psi.shape}")
        for name, grid in ((PHI, phi), (PSI, psi)):
            k = grid.shape[0]
            for i in range(k):
                for j in range(i):
                    if grid[i, j] != grid[j, i]:
                        raise ModelError(f"{name} pattern is not symmetric at ({i}, {j})")
        if self.observed and len(self.observed) != p:
            raise ModelError("observed names do not match lambda rows")
        if self.factors and len(self.factors) != m:
            raise ModelError("factor names do not match lambda columns")

        # Flatten the free/fixed map into index arrays used by unpack/pack.
        index = {}
        seen = []
        for name, grid, symmetric in ((LAMBDA, lam, False), (PHI, phi, True), (PSI, psi, True)):
            base = np.zeros(grid.shape)
            rows, cols, idx = [], [], []
            for i in range(grid.shape[0]):
                for j in range(grid.shape[1] if not symmetric else i + 1):
                    entry = grid[i, j]
                    if isinstance(entry, Fixed):
                        base[i, j] = entry.value
                        if symmetric:
                            base[j, i] = entry.value
                    elif isinstance(entry, Free):
                        rows.append(i)
                        cols.append(j)
                        idx.append(entry.index)
                        seen.append(entry.index)
                    else:
                        raise ModelError(f"bad entry {entry!r} in {name}[{i}, {j}]")
            index[name] = (base, np.array(rows, dtype=int), np.array(cols, dtype=int),
                           np.array(idx, dtype=int))
        if sorted(seen) != list(range(len(seen))):
            raise ModelError("free indices must enumerate 0..q-1 without gaps or duplicates")
        object.__setattr__(self, "_index", index)

        q = len(seen)
        if q > self.p_star:
            raise ModelError(f"model has {q} free parameters but only {self.p_star} moments")

    @property
    def p(self) -> int:
        return self.lambda_pattern.shape[0]

    @property
    def m(self) -> int:
        return self.lambda_pattern.shape[1]

    @property
    def p_star(self) -> int:
        return self.p * (self.p + 1) // 2

    @property
    def q(self) -> int:
        return sum(len(v[3]) for v in self._index.values())

    def positions(self) -> list:
        """Free-parameter positions, ordered by free index."""
        out = [None] * self.q
        for name in MATRICES:
            _, rows, cols, idx = self._index[name]
            for r, c, k in zip(rows, cols, idx):
                out[k] = Position(name, int(r), int(c))
        return out

    def entry(self, pos: Position) -> ParamEntry:
        pos = pos.normalized()
        grid = {LAMBDA: self.lambda_pattern, PHI: self.phi_pattern, PSI: self.psi_pattern}[pos.matrix]
        return grid[pos.row, pos.col]

    def starts(self) -> np.ndarray:
        theta = np.zeros(self.q)
        for k, pos in enumerate(self.positions()):
            theta[k] = self.entry(pos).start
        return theta

    def free(self, pos: Position, start: float | None = None) -> "CfaModel":
        """Return a copy with ``pos`` freed as parameter index q.

        The new parameter starts at the entry's fixed value unless ``start``
        is given.
        """
        pos = pos.normalized()
        entry = self.entry(pos)
        if not isinstance(entry, Fixed):
            raise ModelError(f"{pos} is already free")
        new = Free(self.q, entry.value if start is None else start)
        grids = [self.lambda_pattern.copy(), self.phi_pattern.copy(), self.psi_pattern.copy()]
        g = grids[MATRICES.index(pos.matrix)]
        g[pos.row, pos.col] = new
        if pos.matrix != LAMBDA:
            g[pos.col, pos.row] = new
        return CfaModel(*grids, observed=self.observed, factors=self.factors)

    def label(self, pos: Position) -> str:
        obs = self.observed or tuple(f"x{i + 1}" for i in range(self.p))
        fac = self.factors or tuple(f"f{j + 1}" for j in range(self.m))
        if pos.matrix == LAMBDA:
            return f"{obs[pos.row]}<-{fac[pos.col]}"
        names = fac if pos.matrix == PHI else obs
        return f"{names[pos.row]}~~{names[pos.col]}"


def unpack(model: CfaModel, theta) -> tuple:
    """Return (Lambda, Phi, Psi) for parameter vector ``theta``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.q,):
        raise DimensionError(f"theta has length {theta.size}, model expects {model.q}")
    out = []
    for name in MATRICES:
        base, rows, cols, idx = model._index[name]
        mat = base.copy()
        mat[rows, cols] = theta[idx]
        if name != LAMBDA:
            mat[cols, rows] = theta[idx]
        out.append(mat)
    return tuple(out)


def pack(model: CfaModel, Lambda, Phi, Psi) -> np.ndarray:
    """Inverse of :func:`unpack`: read the free entries out of the matrices."""
    theta = np.zeros(model.q)
    for name, mat in zip(MATRICES, (Lambda, Phi, Psi)):
        _, rows, cols, idx = model._index[name]
        theta[idx] = np.asarray(mat)[rows, cols]
    return theta


def implied_covariance(model: CfaModel, theta) -> np.ndarray:
    Lambda, Phi, Psi = unpack(model, theta)
    sigma = Lambda @ Phi @ Lambda.T + Psi
    return 0.5 * (sigma + sigma.T)


def degrees_of_freedom(model: CfaModel) -> int:
    return model.p_star - model.q


def entry_derivative(Lambda, Phi, pos: Position) -> np.ndarray:
    """dSigma with respect to the entry at ``pos`` (symmetric pair moved together)."""
    p = Lambda.shape[0]
    i, j = pos.row, pos.col
    d = np.zeros((p, p))
    if pos.matrix == LAMBDA:
        a = Lambda @ Phi[:, j]
        d[i, :] += a
        d[:, i] += a
    elif pos.matrix == PHI:
        d += np.outer(Lambda[:, i], Lambda[:, j])
        if i != j:
            d += np.outer(Lambda[:, j], Lambda[:, i])
    else:
        d[i, j] = 1.0
        d[j, i] = 1.0
    return d


def sigma_derivatives(model: CfaModel, theta) -> np.ndarray:
    """Stack of dSigma/dtheta_k, shape (q, p, p)."""
    Lambda, Phi, _ = unpack(model, theta)
    out = np.zeros((model.q, model.p, model.p))
    for k, pos in enumerate(model.positions()):
        out[k] = entry_derivative(Lambda, Phi, pos)
    return out


def vech_indices(p: int) -> tuple:
    return np.tril_indices(p)


def sigma_jacobian(model: CfaModel, theta) -> np.ndarray:
    """Jacobian of vech(Sigma) with respect to theta, shape (p*, q)."""
    rows, cols = vech_indices(model.p)
    return sigma_derivatives(model, theta)[:, rows, cols].T


# -- builders ---------------------------------------------------------------

def build_model(observed: Sequence[str], factors: Sequence[str], loadings, factor_cov=(),
                unique_cov=()) -> CfaModel:
    """Build a model from named entries.

    Each entry in ``loadings`` is ``(var, factor, spec)`` and each covariance
    entry is ``(name_a, name_b, spec)``, where ``spec`` is ``Fixed(v)`` or a
    start value (float) for a free parameter.  Unlisted factor variances are
    fixed at 1, unlisted unique variances are free (start 0.5), every other
    unlisted entry is fixed at 0.
    """
    observed, factors = tuple(observed), tuple(factors)
    p, m = len(observed), len(factors)
    vpos = {v: i for i, v in enumerate(observed)}
    fpos = {f: j for j, f in enumerate(factors)}
    if len(vpos) != p or len(fpos) != m:
        raise ModelError("duplicate variable or factor names")

    def lookup(table, name, kind):
        try:
            return table[name]
        except KeyError:
            raise ModelError(f"unknown {kind} {name!r}") from None

    counter = iter(range(10**9))

    def make(spec):
        return spec if isinstance(spec, Fixed) else Free(next(counter), float(spec))

    lam, phi, psi = {}, {}, {}
    for var, fac, spec in loadings:
        lam[(lookup(vpos, var, "variable"), lookup(fpos, fac, "factor"))] = spec
    for a, b, spec in factor_cov:
        i, j = lookup(fpos, a, "factor"), lookup(fpos, b, "factor")
        phi[(max(i, j), min(i, j))] = spec
    for a, b, spec in unique_cov:
        i, j = lookup(vpos, a, "variable"), lookup(vpos, b, "variable")
        psi[(max(i, j), min(i, j))] = spec
    for j in range(m):
        phi.setdefault((j, j), Fixed(1.0))
    for i in range(p):
        psi.setdefault((i, i), 0.5)

    # Indices are assigned in lambda (row-major), phi, psi order.
    lam_e = {k: make(lam[k]) for k in sorted(lam)}
    phi_e = {k: make(phi[k]) for k in sorted(phi)}
    psi_e = {k: make(psi[k]) for k in sorted(psi)}

    for j in range(m):
        var_fixed = isinstance(phi_e[(j, j)], Fixed)
        marker = any(isinstance(e, Fixed) and e.value != 0.0
                     for (i, jj), e in lam_e.items() if jj == j)
        if var_fixed == marker:
            raise ModelError(
                f"factor {factors[j]!r} must be identified by exactly one of a fixed "
                "variance or a fixed nonzero loading")

    return CfaModel(_pattern_grid(lam_e, (p, m), False), _pattern_grid(phi_e, (m, m), True),
                    _pattern_grid(psi_e, (p, p), True), observed=observed, factors=factors)


def independence_model(p: int, observed: Sequence[str] = ()) -> CfaModel:
    """Zero-factor baseline model with free diagonal variances."""
    psi = {(i, i): Free(i, 0.5) for i in range(p)}
    return CfaModel(np.empty((p, 0), dtype=object), np.empty((0, 0), dtype=object),
                    _pattern_grid(psi, (p, p), True), observed=tuple(observed))


POPULATION_LOADING = 0.70
POPULATION_FACTOR_CORR = 0.30


def population_model():
    """Three-factor, five-indicator simulation model and its population theta.

    Returns (model, theta) with 15 free loadings, 3 free factor correlations
    and 15 free unique variances (q = 33, df = 87).  Unique variances make
    every observed variance exactly one.
    """
    observed = [f"x{i + 1}" for i in range(15)]
    factors = ["f1", "f2", "f3"]
    loadings = [(observed[i], factors[i // 5], POPULATION_LOADING) for i in range(15)]
    corr = [(factors[a], factors[b], 0.0) for a, b in ((1, 0), (2, 0), (2, 1))]
    model = build_model(observed, factors, loadings, corr)

    Lambda = np.zeros((15, 3))
    for i in range(15):
        Lambda[i, i // 5] = POPULATION_LOADING
    Phi = np.full((3, 3), POPULATION_FACTOR_CORR)
    np.fill_diagonal(Phi, 1.0)
    Psi = np.diag(1.0 - np.diag(Lambda @ Phi @ Lambda.T))
    return model, pack(model, Lambda, Phi, Psi)


# -- JSON model files -------------------------------------------------------

def _entry_spec(item, where, default_start):
    if "value" in item:
        return Fixed(float(item["value"]))
    return float(item.get("start", default_start))


def model_from_dict(doc: dict) -> CfaModel:
    try:
        observed = list(doc["observed"])
        factors = list(doc["factors"])
    except KeyError as exc:
        raise ModelError(f"model file is missing key {exc.args[0]!r}") from None
    try:
        loadings = [(it["var"], it["factor"], _entry_spec(it, "loadings", 0.7))
                    for it in doc.get("loadings", [])]
        fcov = [(it["pair"][0], it["pair"][1], _entry_spec(it, "factor_cov", 0.0))
                for it in doc.get("factor_cov", [])]
        ucov = [(it["pair"][0], it["pair"][1], _entry_spec(it, "unique_cov", 0.5))
                for it in doc.get("unique_cov", [])]
    except (KeyError, IndexError, TypeError) as exc:
        raise ModelError(f"malformed model entry: {exc}") from None
    return build_model(observed, factors, loadings, fcov, ucov)


def load_model(path) -> CfaModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: invalid JSON ({exc})") from None
    return model_from_dict(doc)


def model_to_dict(model: CfaModel) -> dict:
    obs = list(model.observed or [f"x{i + 1}" for i in range(model.p)])
    fac = list(model.factors or [f"f{j + 1}" for j in range(model.m)])

    def item(entry, **keys):
        if isinstance(entry, Fixed):
            keys["value"] = entry.value
        else:
            keys["start"] = entry.start
        return keys

    doc = {"observed": obs, "factors": fac, "loadings": [], "factor_cov": [], "unique_cov": []}
    for i in range(model.p):
        for j in range(model.m):
            e = model.lambda_pattern[i, j]
            if isinstance(e, Free) or e.value != 0.0:
                doc["loadings"].append(item(e, var=obs[i], factor=fac[j]))
    for i in range(model.m):
        for j in range(i + 1):
            e = model.phi_pattern[i, j]
            if isinstance(e, Free) or e.value != (1.0 if i == j else 0.0):
                doc["factor_cov"].append(item(e, pair=[fac[i], fac[j]]))
    for i in range(model.p):
        for j in range(i + 1):
            e = model.psi_pattern[i, j]
            default_free = i == j and isinstance(e, Free) and e.start == 0.5
            if default_free or (isinstance(e, Fixed) and i != j and e.value == 0.0):
                continue
            doc["unique_cov"].append(item(e, pair=[obs[i], obs[j]]))
    return doc
