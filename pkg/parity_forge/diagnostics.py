"""Independence checks: G tests, Benjamini-Hochberg, Cramér's V and PIT uniformity."""
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import pandas as pd
from loguru import logger
from scipy import stats
from scipy.special import xlogy
from scipy.stats.contingency import association

from parity_forge.condmodels import CondModel, DesignMatrix
from parity_forge.empirical import Ecdf, quantile
from parity_forge.errors import DegenerateDataError, InsufficientDataError
from parity_forge.rng import keyed_generator

LOW_POWER_N = 20


# -----------------------------
# Contingency tables
# -----------------------------
@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray
    row_levels: tuple = ()
    col_levels: tuple = ()
    dropped: tuple = ()

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_codes(cls, a, b) -> "ContingencyTable":
        a, b = np.asarray(a), np.asarray(b)
        if a.size != b.size:
            raise InsufficientDataError(f"code vectors differ in length ({a.size} vs {b.size})")
        tab = pd.crosstab(a, b)
        return cls(tab.to_numpy(dtype=np.int64), tuple(tab.index), tuple(tab.columns))

    def without_empty_margins(self) -> "ContingencyTable":
        rows = self.counts.sum(axis=1) > 0
        cols = self.counts.sum(axis=0) > 0
        if rows.all() and cols.all():
            return self
        dropped = [f"row {i}" for i in np.flatnonzero(~rows)] + [f"column {j}" for j in np.flatnonzero(~cols)]
        logger.warning(f"dropping empty contingency levels: {', '.join(dropped)}")
        row_levels = tuple(np.asarray(self.row_levels, dtype=object)[rows]) if self.row_levels else ()
        col_levels = tuple(np.asarray(self.col_levels, dtype=object)[cols]) if self.col_levels else ()
        return ContingencyTable(self.counts[rows][:, cols], row_levels, col_levels, tuple(dropped))

    def _check(self) -> None:
        d1, d2 = self.counts.shape
        if d1 < 2 or d2 < 2:
            raise DegenerateDataError(f"contingency table needs at least 2 levels per variable, got {d1}x{d2}")


@dataclass(frozen=True)
class GTestResult:
    G: float
    df: int
    p: float
    dropped: tuple = ()


def mutual_information(table: ContingencyTable) -> float:
    """Empirical mutual information (nats) of a two-way table."""
    pij = table.counts / table.n
    pi = pij.sum(axis=1, keepdims=True)
    pj = pij.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = xlogy(pij, pij / (pi * pj))
    return math.fsum(np.nan_to_num(terms).ravel())


def g_test_table(table: ContingencyTable) -> GTestResult:
    table = table.without_empty_margins()
    table._check()
    obs = table.counts.astype(float)
    expected = obs.sum(axis=1, keepdims=True) * obs.sum(axis=0, keepdims=True) / obs.sum()
    # fsum is correctly rounded, so G(a, b) == G(b, a) exactly
    G = 2.0 * math.fsum(xlogy(obs, obs / expected).ravel())
    G = max(G, 0.0)
    d1, d2 = obs.shape
    df = (d1 - 1) * (d2 - 1)
    return GTestResult(G, df, float(stats.chi2.sf(G, df)), table.dropped)


def g_test(a, b) -> GTestResult:
    return g_test_table(ContingencyTable.from_codes(a, b))


def bh_adjust(p) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, returned in input order."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return p.copy()
    return np.maximum(stats.false_discovery_control(p, method="bh"), p)


def cramers_v(a, b) -> float:
    table = ContingencyTable.from_codes(a, b).without_empty_margins()
    table._check()
    return float(association(table.counts, method="cramer", correction=False))


# -----------------------------
# Discretization
# -----------------------------
def discretize_for_test(x, max_levels: int = 10) -> np.ndarray:
    """Codes with at most ``max_levels`` values; decile bins for richer numeric columns.

    Non-numeric columns have no order to bin along, so every level keeps its own code.
    """
    if max_levels < 2:
        raise ValueError("max_levels must be at least 2")
    x = np.asarray(x)
    levels, codes = np.unique(x, return_inverse=True)
    if levels.size < 2:
        raise DegenerateDataError("cannot discretize a constant column")
    if levels.size <= max_levels or not pd.api.types.is_numeric_dtype(x):
        return codes
    probs = np.arange(1, max_levels) / max_levels
    cuts = np.unique(quantile(Ecdf.from_sample(x), probs).astype(float))
    bins = np.searchsorted(cuts, x.astype(float), side="left")
    _, codes = np.unique(bins, return_inverse=True)
    return codes


# -----------------------------
# Reports
# -----------------------------
@dataclass
class IndependenceReport:
    table: pd.DataFrame
    replicate: int | None = None
    warnings: list[str] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        return self.table.to_dict(orient="records")


def independence_report(frame: pd.DataFrame, protected: list[str], features: list[str],
                        replicate: int | None = None, max_levels: int = 10) -> IndependenceReport:
    """G test and Cramér's V for every (protected, feature) pair, with BH-adjusted p-values."""
    rows, warnings = [], []
    for z in protected:
        z_codes = discretize_for_test(frame[z].to_numpy(), max_levels)
        for x in features:
            x_codes = discretize_for_test(frame[x].to_numpy(), max_levels)
            res = g_test(z_codes, x_codes)
            if res.dropped:
                warnings.append(f"{z} vs {x}: dropped empty levels {', '.join(res.dropped)}")
            rows.append({"protected": z, "variable": x, "G": res.G, "df": res.df, "p_raw": res.p,
                         "cramers_v": cramers_v(z_codes, x_codes)})
    table = pd.DataFrame(rows, columns=["protected", "variable", "G", "df", "p_raw", "cramers_v"])
    table.insert(5, "p_bh", bh_adjust(table["p_raw"].to_numpy()))
    if replicate is not None:
        table.insert(0, "replicate", replicate)
    return IndependenceReport(table, replicate, warnings)


def pairwise_cramers_v(frame: pd.DataFrame, columns: list[str], max_levels: int = 10) -> pd.DataFrame:
    codes = {c: discretize_for_test(frame[c].to_numpy(), max_levels) for c in columns}
    rows = [{"var1": a, "var2": b, "cramers_v": cramers_v(codes[a], codes[b])} for a, b in combinations(columns, 2)]
    return pd.DataFrame(rows, columns=["var1", "var2", "cramers_v"])


# -----------------------------
# PIT
# -----------------------------
@dataclass(frozen=True)
class PitGroup:
    group: str
    n: int
    ks: float
    p_value: float
    low_power: bool
    values: np.ndarray = field(repr=False)


def pit_from_values(pit, groups) -> list[PitGroup]:
    pit, groups = np.asarray(pit, dtype=float), np.asarray(groups, dtype=object)
    out = []
    for g in sorted(np.unique(groups), key=str):
        u = pit[groups == g]
        res = stats.kstest(u, "uniform")
        low = u.size < LOW_POWER_N
        if low:
            logger.warning(f"PIT group '{g}' has {u.size} observations; the KS check has low power")
        out.append(PitGroup(str(g), int(u.size), float(res.statistic), float(res.pvalue), low, u))
    return out


def pit_values(m: CondModel, x, rows: DesignMatrix, rng: np.random.Generator) -> np.ndarray:
    """Randomized PIT for atomic models, plain F(x) for continuous ones."""
    right = m.cdf(x, rows)
    if not m.atomic:
        return right
    left = m.cdf_left(x, rows)
    return left + (right - left) * rng.random(right.size)


def pit_check(m: CondModel, x, rows: DesignMatrix, groups, seed: int = 0) -> list[PitGroup]:
    return pit_from_values(pit_values(m, x, rows, keyed_generator(seed, 0)), groups)


def ks_band(n: int) -> float:
    """Asymptotic 95% Kolmogorov-Smirnov band."""
    return 1.36 / math.sqrt(n)
