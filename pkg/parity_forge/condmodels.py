"""Conditional distribution models F(x_j | design) fitted by maximum likelihood.

Families share one contract: ``cdf(x, rows)``, ``cdf_left(x, rows)`` (atomic
families only) and ``atomic``. Count families use a log link for the mean;
zero-inflated families add a logit-linked structural-zero probability; the
negative binomial uses the mean/size parameterization (variance mu + mu^2/theta)
with theta = exp(log_theta).
"""
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from loguru import logger
from scipy import optimize, stats
from scipy.linalg import block_diag
from scipy.special import digamma, expit, gammaln, log_expit, logit

from parity_forge.core import Family
from parity_forge.core import OptimizerOptions
from parity_forge.core import group_labels as _group_labels
from parity_forge.empirical import Ecdf, grouped_ecdfs
from parity_forge.errors import (
    ContractError,
    ConvergenceError,
    DegenerateFitError,
    DivergenceError,
    InsufficientDataError,
    UnknownGroupError,
)

INTERCEPT = "(intercept)"
COUNT_FAMILIES = {Family.poisson, Family.zero_inflated_poisson, Family.zero_inflated_negbin}
ZI_FAMILIES = {Family.zero_inflated_poisson, Family.zero_inflated_negbin}
STALL_TOL = 1e-5
DECREMENT_TOL = 1e-14
EIGEN_FLOOR = 1e-10


# -----------------------------
# Design matrices
# -----------------------------
@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    columns: tuple[str, ...]
    groups: np.ndarray | None = None
    dropped: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.values.shape[0] if self.values.ndim == 2 else len(self.groups)

    @classmethod
    def from_array(cls, X, groups=None) -> "DesignMatrix":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = tuple(INTERCEPT if np.all(X[:, j] == 1.0) else f"x{j}" for j in range(X.shape[1]))
        return cls(X, cols, None if groups is None else np.asarray(groups, dtype=object))

    @classmethod
    def from_groups(cls, groups) -> "DesignMatrix":
        groups = np.asarray(groups, dtype=object)
        return cls(np.ones((groups.size, 1)), (INTERCEPT,), groups)

    def take(self, idx) -> "DesignMatrix":
        g = None if self.groups is None else self.groups[idx]
        return DesignMatrix(self.values[idx], self.columns, g, self.dropped)


def build_design(
    frame: pd.DataFrame,
    covariates: list[str],
    categorical: dict[str, tuple] | None = None,
    interactions: list[tuple[str, str]] | None = None,
    group_by: list[str] | None = None,
) -> DesignMatrix:
    """Intercept + numeric covariates + one-hot categoricals + declared products.

    Categorical levels are one-hot encoded by sorted level name with the first
    level dropped. Columns without variation are dropped and recorded.
    """
    categorical = categorical or {}
    blocks: dict[str, np.ndarray] = {INTERCEPT: np.ones(len(frame))}
    per_cov: dict[str, list[str]] = {}
    for name in covariates:
        if name in categorical:
            levels = sorted(categorical[name], key=str)
            vals = frame[name].astype(str).to_numpy()
            per_cov[name] = []
            for level in levels[1:]:
                col = f"{name}[{level}]"
                blocks[col] = (vals == str(level)).astype(float)
                per_cov[name].append(col)
        else:
            blocks[name] = frame[name].to_numpy(dtype=float)
            per_cov[name] = [name]
    for a, b in interactions or []:
        for ca in per_cov.get(a, [a]):
            for cb in per_cov.get(b, [b]):
                va = blocks[ca] if ca in blocks else frame[ca].to_numpy(dtype=float)
                vb = blocks[cb] if cb in blocks else frame[cb].to_numpy(dtype=float)
                blocks[f"{ca}:{cb}"] = va * vb

    kept, dropped = [INTERCEPT], []
    for col, v in blocks.items():
        if col == INTERCEPT:
            continue
        (kept if np.ptp(v) > 0 else dropped).append(col)
    X = np.column_stack([blocks[c] for c in kept])
    groups = _group_labels(frame, group_by) if group_by is not None else None
    return DesignMatrix(X, tuple(kept), groups, tuple(dropped))


def _standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (Xs, T) with Xs centred/scaled and raw coefficients = T @ standardized ones."""
    p = X.shape[1]
    T = np.eye(p)
    ones = [j for j in range(p) if np.all(X[:, j] == 1.0)]
    i0 = ones[0] if ones else None
    Xs = X.copy()
    for j in range(p):
        if j in ones:
            continue
        s = X[:, j].std()
        if s == 0:
            continue
        m = X[:, j].mean() if i0 is not None else 0.0
        Xs[:, j] = (X[:, j] - m) / s
        T[j, j] = 1.0 / s
        if i0 is not None:
            T[i0, j] = -m / s
    return Xs, T


# -----------------------------
# Log-likelihoods
# -----------------------------
def _split(family: Family, params: np.ndarray, p: int, r: int):
    params = np.asarray(params, dtype=float)
    if family in ZI_FAMILIES:
        gamma, beta = params[:r], params[r:r + p]
        log_theta = params[r + p] if family == Family.zero_inflated_negbin else None
        return gamma, beta, log_theta
    if family == Family.gaussian_linear:
        return None, params[:p], params[p]
    return None, params[:p], None


def _count_terms(family: Family, y, eta, log_theta):
    """log pmf of the count component plus derivatives wrt eta and log_theta."""
    mu = np.exp(eta)
    if family in (Family.poisson, Family.zero_inflated_poisson):
        c = y * eta - mu - gammaln(y + 1)
        return c, y - mu, None
    theta = np.exp(log_theta)
    log_tm = np.logaddexp(log_theta, eta)
    c = (gammaln(y + theta) - gammaln(theta) - gammaln(y + 1)
         + theta * (log_theta - log_tm) + y * (eta - log_tm))
    w = expit(log_theta - eta)  # theta / (theta + mu)
    d_eta = w * (y - mu)
    d_theta = digamma(y + theta) - digamma(theta) + log_theta - log_tm + (mu - y) / (theta + mu)
    return c, d_eta, d_theta * theta


def _loglik(family: Family, params, y, X, G=None):
    """Per-observation log-likelihood and total gradient."""
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    r = 0 if G is None else G.shape[1]
    gamma, beta, extra = _split(family, params, p, r)
    eta = X @ beta

    if family == Family.gaussian_linear:
        sigma2 = np.exp(2 * extra)
        resid = y - eta
        ll = -0.5 * np.log(2 * np.pi) - extra - resid**2 / (2 * sigma2)
        grad = np.concatenate([X.T @ (resid / sigma2), [np.sum(resid**2 / sigma2 - 1.0)]])
        return ll, grad

    if family == Family.logistic_binary:
        ll = y * eta - np.logaddexp(0.0, eta)
        return ll, X.T @ (y - expit(eta))

    if family == Family.poisson:
        c, d_eta, _ = _count_terms(family, y, eta, None)
        return c, X.T @ d_eta

    # zero-inflated
    zeta = G @ gamma
    log_pi = -np.logaddexp(0.0, -zeta)
    log_1mpi = -np.logaddexp(0.0, zeta)
    c, d_eta, d_lt = _count_terms(family, y, eta, extra)
    zero = y == 0
    ll = np.where(zero, np.logaddexp(log_pi, log_1mpi + c), log_1mpi + c)
    with np.errstate(divide="ignore"):
        log_1mf0 = np.log(-np.expm1(np.minimum(c, 0.0)))
    d_zeta = np.where(zero, np.exp(log_pi + log_1mpi + log_1mf0 - ll), -np.exp(log_pi))
    w_count = np.where(zero, np.exp(log_1mpi + c - ll), 1.0)
    parts = [G.T @ d_zeta, X.T @ (w_count * d_eta)]
    if family == Family.zero_inflated_negbin:
        parts.append([np.sum(w_count * d_lt)])
    return ll, np.concatenate(parts)


def negloglik(family: Family | str, params, y, X, G=None) -> float:
    ll, _ = _loglik(Family(family), params, y, np.asarray(X, float), None if G is None else np.asarray(G, float))
    return float(-np.sum(ll))


def negloglik_grad(family: Family | str, params, y, X, G=None) -> np.ndarray:
    _, grad = _loglik(Family(family), params, y, np.asarray(X, float), None if G is None else np.asarray(G, float))
    return -grad


def parameter_names(family: Family, columns, inflation_columns=()) -> list[str]:
    if family in ZI_FAMILIES:
        names = [f"inflate:{c}" for c in inflation_columns] + [f"count:{c}" for c in columns]
        return names + (["log_theta"] if family == Family.zero_inflated_negbin else [])
    if family == Family.gaussian_linear:
        return list(columns) + ["sigma"]
    return list(columns)


# -----------------------------
# Fitted model
# -----------------------------
@dataclass(frozen=True)
class CondModel:
    family: Family
    coefficients: pd.Series
    design_columns: tuple[str, ...]
    inflation: str = "covariates"
    fit_diagnostics: dict = field(default_factory=dict)
    covariance: np.ndarray | None = field(default=None, repr=False)
    ecdfs: dict | None = field(default=None, repr=False)
    atomic: bool = True

    # -- parameters on rows
    def _check(self, rows: DesignMatrix) -> None:
        if self.family == Family.empirical_by_group:
            if rows.groups is None:
                raise ContractError("empirical_by_group model needs grouped design rows")
            return
        if tuple(rows.columns) != tuple(self.design_columns):
            raise ContractError(f"design columns {rows.columns} do not match fitted {self.design_columns}")

    def _block(self, prefix: str) -> np.ndarray:
        return self.coefficients[[f"{prefix}{c}" for c in self.design_columns]].to_numpy()

    def mean_count(self, rows: DesignMatrix) -> np.ndarray:
        prefix = "count:" if self.family in ZI_FAMILIES else ""
        return np.exp(rows.values @ self._block(prefix))

    def zero_prob(self, rows: DesignMatrix) -> np.ndarray:
        if self.inflation == "intercept":
            return np.full(rows.n, expit(self.coefficients[f"inflate:{INTERCEPT}"]))
        return expit(rows.values @ self._block("inflate:"))

    @property
    def theta(self) -> float:
        return float(np.exp(self.coefficients["log_theta"]))

    def _count_cdf(self, k, rows: DesignMatrix) -> np.ndarray:
        mu = self.mean_count(rows)
        if self.family == Family.zero_inflated_negbin:
            base = stats.nbinom.cdf(k, self.theta, self.theta / (self.theta + mu))
        else:
            base = stats.poisson.cdf(k, mu)
        if self.family in ZI_FAMILIES:
            pi = self.zero_prob(rows)
            base = np.where(k >= 0, pi + (1 - pi) * base, 0.0)
        return np.where(k >= 0, base, 0.0)

    def cdf(self, x, rows: DesignMatrix) -> np.ndarray:
        """P(X <= x | row), vectorised over rows (x scalar or one value per row)."""
        self._check(rows)
        x = np.broadcast_to(np.asarray(x, dtype=float), (rows.n,))
        if self.family == Family.empirical_by_group:
            return self._grouped(x, rows, "cdf")
        if self.family == Family.gaussian_linear:
            mu = rows.values @ self._block("")
            sigma = float(self.coefficients["sigma"])
            if sigma == 0:
                return (x >= mu).astype(float)
            return stats.norm.cdf((x - mu) / sigma)
        if self.family == Family.logistic_binary:
            p1 = expit(rows.values @ self._block(""))
            return np.where(x < 0, 0.0, np.where(x < 1, 1.0 - p1, 1.0))
        return self._count_cdf(np.floor(x), rows)

    def cdf_left(self, x, rows: DesignMatrix) -> np.ndarray:
        """P(X < x | row)."""
        if self.family == Family.gaussian_linear:
            raise ContractError("left-limit CDF is only defined for atomic families")
        self._check(rows)
        x = np.broadcast_to(np.asarray(x, dtype=float), (rows.n,))
        if self.family == Family.empirical_by_group:
            return self._grouped(x, rows, "cdf_left")
        if self.family == Family.logistic_binary:
            p1 = expit(rows.values @ self._block(""))
            return np.where(x <= 0, 0.0, np.where(x <= 1, 1.0 - p1, 1.0))
        return self._count_cdf(np.ceil(x) - 1, rows)

    def pmf(self, x, rows: DesignMatrix) -> np.ndarray:
        return self.cdf(x, rows) - self.cdf_left(x, rows)

    def logpmf(self, x, rows: DesignMatrix) -> np.ndarray:
        """log P(X = x | row) evaluated directly, so far-tail mass stays visible when CDF differences round to 0."""
        if not self.atomic:
            raise ContractError("point masses are only defined for atomic families")
        self._check(rows)
        x = np.broadcast_to(np.asarray(x, dtype=float), (rows.n,))
        with np.errstate(divide="ignore"):
            if self.family == Family.empirical_by_group:
                return np.log(self._grouped(x, rows, "cdf") - self._grouped(x, rows, "cdf_left"))
            if self.family == Family.logistic_binary:
                eta = rows.values @ self._block("")
                return np.where(x == 1, log_expit(eta), np.where(x == 0, log_expit(-eta), -np.inf))
            integer = (x >= 0) & (x == np.floor(x))
            k = np.where(integer, x, 0.0)
            mu = self.mean_count(rows)
            if self.family == Family.zero_inflated_negbin:
                base = stats.nbinom.logpmf(k, self.theta, self.theta / (self.theta + mu))
            else:
                base = stats.poisson.logpmf(k, mu)
            if self.family in ZI_FAMILIES:
                pi = self.zero_prob(rows)
                structural = np.log1p(-pi) + base
                base = np.where(k == 0, np.logaddexp(np.log(pi), structural), structural)
            return np.where(integer, base, -np.inf)

    def _grouped(self, x, rows: DesignMatrix, how: str) -> np.ndarray:
        out = np.empty(rows.n)
        for g in np.unique(rows.groups):
            if g not in self.ecdfs:
                raise UnknownGroupError(f"group '{g}' was not seen when the model was fitted")
            idx = rows.groups == g
            out[idx] = getattr(self.ecdfs[g], how)(x[idx])
        return out

    # -- inference
    def standard_errors(self) -> pd.Series:
        if self.covariance is None:
            raise ContractError(f"{self.family.value} model carries no covariance")
        return pd.Series(np.sqrt(np.clip(np.diag(self.covariance), 0, None)), index=self.coefficients.index)

    # -- provenance
    def to_dict(self) -> dict:
        out = {
            "family": self.family.value,
            "coefficients": {k: float(v) for k, v in self.coefficients.items()},
            "design_columns": list(self.design_columns),
            "inflation": self.inflation,
            "fit_diagnostics": self.fit_diagnostics,
            "atomic": self.atomic,
        }
        if self.covariance is not None:
            out["covariance"] = self.covariance.tolist()
        if self.ecdfs is not None:
            out["ecdfs"] = {str(g): {"support": e.support.tolist(), "cum_probs": e.cum_probs.tolist(), "n": e.n}
                            for g, e in self.ecdfs.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CondModel":
        ecdfs = None
        if "ecdfs" in d:
            ecdfs = {g: Ecdf(np.asarray(e["support"]), np.asarray(e["cum_probs"]), e["n"])
                     for g, e in d["ecdfs"].items()}
        cov = np.asarray(d["covariance"]) if "covariance" in d else None
        return cls(Family(d["family"]), pd.Series(d["coefficients"], dtype=float), tuple(d["design_columns"]),
                   d.get("inflation", "covariates"), d.get("fit_diagnostics", {}), cov, ecdfs, d.get("atomic", True))


def eval_cdf(m: CondModel, x, rows: DesignMatrix) -> np.ndarray:
    return m.cdf(x, rows)


def eval_cdf_left(m: CondModel, x, rows: DesignMatrix) -> np.ndarray:
    return m.cdf_left(x, rows)


# -----------------------------
# Fitting
# -----------------------------
def fit_empirical_by_group(y, g, atomic: bool | None = None) -> CondModel:
    y, g = np.asarray(y), np.asarray(g, dtype=object)
    levels, counts = np.unique(g, return_counts=True)
    for level, count in zip(levels, counts):
        if count < 2:
            raise InsufficientDataError(f"group '{level}' has {count} observation; at least 2 are needed")
    ecdfs = grouped_ecdfs(y, g)
    if atomic is None:
        atomic = np.unique(y).size < y.size
    diag = {"n": int(y.size), "groups": {str(k): int(v) for k, v in zip(levels, counts)}}
    return CondModel(Family.empirical_by_group, pd.Series(dtype=float), (INTERCEPT,),
                     fit_diagnostics=diag, ecdfs=ecdfs, atomic=bool(atomic))


def _check_response(family: Family, y: np.ndarray) -> None:
    if not np.all(np.isfinite(y)):
        raise ContractError("response contains non-finite values")
    if family in COUNT_FAMILIES and (np.any(y < 0) or np.any(y != np.floor(y))):
        raise ContractError(f"{family.value} needs non-negative integer counts")
    if family == Family.logistic_binary and not np.all((y == 0) | (y == 1)):
        raise ContractError("logistic_binary needs a 0/1 response")


def _fit_gaussian(y: np.ndarray, X: DesignMatrix) -> CondModel:
    beta, *_ = np.linalg.lstsq(X.values, y, rcond=None)
    resid = y - X.values @ beta
    sigma = float(np.sqrt(np.mean(resid**2)))
    degenerate = sigma <= 1e-12 * max(1.0, float(np.abs(y).max()))
    if degenerate:
        sigma = 0.0
        logger.warning("gaussian_linear fit is exact: residual scale 0, model is degenerate")
    n, p = X.values.shape
    cov = None
    if not degenerate:
        xtx_inv = np.linalg.pinv(X.values.T @ X.values)
        cov = np.zeros((p + 1, p + 1))
        cov[:p, :p] = sigma**2 * xtx_inv
        cov[p, p] = sigma**2 / (2 * n)
    ll = -0.5 * n * (np.log(2 * np.pi * sigma**2) + 1) if not degenerate else np.inf
    coef = pd.Series(np.append(beta, sigma), index=parameter_names(Family.gaussian_linear, X.columns))
    diag = {"loglik": float(ll), "iterations": 0, "gradient_norm": 0.0, "converged": True,
            "degenerate": bool(degenerate), "n": int(n), "method": "least-squares"}
    return CondModel(Family.gaussian_linear, coef, X.columns, fit_diagnostics=diag, covariance=cov, atomic=False)


def _start(family: Family, y: np.ndarray, Xs: np.ndarray, Gs: np.ndarray | None) -> np.ndarray:
    def _with_intercept(M, value):
        b = np.zeros(M.shape[1])
        ones = np.flatnonzero(np.all(M == 1.0, axis=0))
        if ones.size:
            b[ones[0]] = value
        return b

    mean = y.mean()
    if family == Family.logistic_binary:
        return _with_intercept(Xs, logit(np.clip(mean, 1e-3, 1 - 1e-3)))
    if family == Family.poisson:
        return _with_intercept(Xs, np.log(max(mean, 1e-3)))
    # moment-based split of zeros into structural and sampling zeros
    p0 = np.mean(y == 0)
    lam = max(y[y > 0].mean() if np.any(y > 0) else 1.0, 1e-3)
    pi0 = np.clip((p0 - np.exp(-lam)) / max(1 - np.exp(-lam), 1e-6), 0.05, 0.95)
    start = [_with_intercept(Gs, logit(pi0)), _with_intercept(Xs, np.log(max(mean / (1 - pi0), 1e-3)))]
    if family == Family.zero_inflated_negbin:
        var = y.var()
        theta0 = np.clip(mean**2 / max(var - mean, 1e-3 * max(mean, 1e-3)), 0.05, 100.0)
        start.append([np.log(theta0)])
    return np.concatenate(start)


def _fd_hessian(grad_fn, x: np.ndarray) -> np.ndarray:
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        h = 1e-5 * max(1.0, abs(x[j]))
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * h)
    return (H + H.T) / 2


def _glm_hessian(family: Family, Xs: np.ndarray):
    """Exact Hessian of the mean negative log-likelihood for the canonical-link GLMs."""
    n = Xs.shape[0]

    def hess(theta):
        eta = Xs @ theta
        w = np.exp(eta) if family == Family.poisson else expit(eta) * expit(-eta)
        return (Xs.T * w) @ Xs / n

    return hess


@dataclass
class PolishResult:
    x: np.ndarray
    iterations: int
    converged: bool
    stalled: bool
    decrement: float


def _newton_polish(fun, grad_fn, hess_fn, x, tol, budget) -> PolishResult:
    """Damped Newton steps with backtracking.

    The Hessian's eigenvalues are replaced by their magnitudes (floored relative
    to the largest) so every step is a descent direction. Stops when the
    gradient norm drops below ``tol`` or when half the Newton decrement
    g' H^-1 g, the predicted remaining decrease of the mean negative
    log-likelihood, is below DECREMENT_TOL relative to the objective.
    """
    f = fun(x)
    decrement = np.inf
    for it in range(budget):
        g = grad_fn(x)
        if np.linalg.norm(g) < tol:
            return PolishResult(x, it, True, False, 0.0)
        w, V = np.linalg.eigh(hess_fn(x))
        w = np.abs(w)
        w = np.maximum(w, EIGEN_FLOOR * max(float(w.max()), np.finfo(float).tiny))
        step = V @ ((V.T @ g) / w)
        if not np.all(np.isfinite(step)):
            step = g
        decrement = 0.5 * float(g @ step)
        if decrement <= DECREMENT_TOL * max(1.0, abs(f)):
            return PolishResult(x, it, True, False, decrement)
        t = 1.0
        while t > 1e-10:
            x_new = x - t * step
            f_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * t * (g @ step):
                break
            t /= 2
        if t <= 1e-10:
            return PolishResult(x, it + 1, False, True, decrement)
        x, f = x_new, f_new
    return PolishResult(x, budget, False, False, decrement)


def _indicator_sides(v: np.ndarray):
    """Row masks (v == 1, v == 0) when ``v`` is a non-constant 0/1 column, else None."""
    ones = v == 1.0
    if not np.all(ones | (v == 0.0)) or ones.all() or not ones.any():
        return None
    return ones, ~ones


def separated_columns(family: Family, y: np.ndarray, X: DesignMatrix, inflation: str) -> tuple[list, list]:
    """Indicator columns whose coefficients have no finite MLE.

    A count coefficient runs off to -inf when one side of a 0/1 indicator holds
    no positive count. With covariate inflation, the structural-zero coefficient
    does the same when one side holds no zero. Returns (count, inflation) names.
    """
    count, inflate = [], []
    for j, col in enumerate(X.columns):
        if col == INTERCEPT:
            continue
        sides = _indicator_sides(X.values[:, j])
        if sides is None:
            continue
        if any(not np.any(y[s] > 0) for s in sides):
            count.append(col)
        if family in ZI_FAMILIES and inflation == "covariates" and any(not np.any(y[s] == 0) for s in sides):
            inflate.append(col)
    if family in ZI_FAMILIES and inflation == "covariates":
        inflate = sorted(set(inflate) | set(count), key=X.columns.index)
    return count, inflate


def fit_conditional(
    family: Family | str,
    y,
    X: DesignMatrix | np.ndarray,
    opts: OptimizerOptions | None = None,
    inflation: str = "covariates",
    atomic: bool | None = None,
) -> CondModel:
    family = Family(family)
    opts = opts or OptimizerOptions()
    X = X if isinstance(X, DesignMatrix) else DesignMatrix.from_array(X)
    y = np.asarray(y, dtype=float)
    if X.n != y.size:
        raise ContractError(f"design has {X.n} rows but the response has {y.size}")

    if family == Family.empirical_by_group:
        if X.groups is None:
            raise ContractError("empirical_by_group needs group labels on the design")
        return fit_empirical_by_group(y, X.groups, atomic)

    _check_response(family, y)
    if family == Family.gaussian_linear:
        return _fit_gaussian(y, X)
    if family in COUNT_FAMILIES and not np.any(y > 0):
        raise DegenerateFitError(f"{family.value} fit on an all-zero count column")
    if family == Family.logistic_binary and np.ptp(y) == 0:
        raise DegenerateFitError("logistic_binary fit on a constant response")

    n = y.size
    drop_count, drop_inflate = [], []
    if family in COUNT_FAMILIES:
        drop_count, drop_inflate = separated_columns(family, y, X, inflation)
        for col in drop_count:
            logger.warning(f"{family.value}: count coefficient of '{col}' is separated; fixed at 0")
        for col in drop_inflate:
            logger.warning(f"{family.value}: inflation coefficient of '{col}' is separated; fixed at 0")
    keep_x = [j for j, c in enumerate(X.columns) if c not in drop_count]
    Xs, Tx = _standardizer(X.values[:, keep_x])
    Gs, Tg, inflation_cols, keep_g = None, None, (), []
    if family in ZI_FAMILIES:
        if inflation == "covariates":
            inflation_cols = X.columns
            keep_g = [j for j, c in enumerate(X.columns) if c not in drop_inflate]
            G = X.values[:, keep_g]
        else:
            inflation_cols, keep_g = (INTERCEPT,), [0]
            G = np.ones((n, 1))
        Gs, Tg = _standardizer(G)

    def fun(theta):
        ll, _ = _loglik(family, theta, y, Xs, Gs)
        return -np.sum(ll) / n

    def grad(theta):
        _, g = _loglik(family, theta, y, Xs, Gs)
        return -g / n

    def fun_and_grad(theta):
        ll, g = _loglik(family, theta, y, Xs, Gs)
        return -np.sum(ll) / n, -g / n

    if family in ZI_FAMILIES:
        def hess(theta):
            return _fd_hessian(grad, theta)
    else:
        hess = _glm_hessian(family, Xs)

    x0 = _start(family, y, Xs, Gs)
    with np.errstate(over="ignore", invalid="ignore"):
        res = optimize.minimize(fun_and_grad, x0, jac=True, method="BFGS",
                                options={"gtol": opts.tol, "maxiter": opts.max_iter})
        polish = _newton_polish(fun, grad, hess, res.x, opts.tol, opts.max_iter)
    theta = polish.x
    iterations = int(res.nit) + polish.iterations
    gnorm = float(np.linalg.norm(grad(theta)))

    # map back to the raw design basis
    blocks = ([Tg] if Tg is not None else []) + [Tx]
    if family == Family.zero_inflated_negbin:
        blocks.append(np.eye(1))
    T = block_diag(*blocks)
    raw = T @ theta

    if not np.all(np.isfinite(raw)) or np.linalg.norm(raw) > opts.divergence_norm:
        raise DivergenceError(f"{family.value} coefficients diverged (norm > {opts.divergence_norm:g})")
    if family == Family.logistic_binary:
        fitted = expit(X.values[:, keep_x] @ raw)
        if np.max(np.abs(y - fitted)) < 1e-6:
            raise DivergenceError("logistic_binary: response is perfectly separated by the design")

    converged = polish.converged or gnorm < opts.tol
    if not converged:
        if polish.stalled and gnorm < STALL_TOL:
            logger.warning(f"{family.value}: line search stalled at gradient norm {gnorm:.2e}; accepting")
            converged = True
        else:
            raise ConvergenceError(
                f"{family.value} did not converge after {iterations} iterations (gradient norm {gnorm:.2e})",
                last_iterate=raw, gradient_norm=gnorm)

    hessian = hess(theta) * n
    try:
        cov_s = np.linalg.inv(hessian)
    except np.linalg.LinAlgError:
        cov_s = np.linalg.pinv(hessian)
    cov = T @ cov_s @ T.T

    # scatter the fitted parameters into the full layout; separated coefficients stay 0
    r = len(inflation_cols)
    pos = list(keep_g) + [r + j for j in keep_x]
    if family == Family.zero_inflated_negbin:
        pos.append(r + len(X.columns))
    names = parameter_names(family, X.columns, inflation_cols)
    full = np.zeros(len(names))
    full[pos] = raw
    full_cov = np.zeros((len(names), len(names)))
    full_cov[np.ix_(pos, pos)] = cov

    diag = {"loglik": float(-fun(theta) * n), "iterations": iterations, "gradient_norm": gnorm,
            "newton_decrement": float(polish.decrement), "converged": bool(converged), "degenerate": False,
            "n": int(n), "method": "bfgs+newton",
            "dropped": {"count": list(drop_count), "inflation": list(drop_inflate)}}
    logger.debug(f"fitted {family.value}: loglik={diag['loglik']:.4f} iters={iterations} |g|={gnorm:.1e}")
    return CondModel(family, pd.Series(full, index=names), X.columns, inflation, diag, full_cov, None, True)
