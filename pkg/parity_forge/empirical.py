"""Empirical distribution functions and their generalized inverse.

``quantile`` defaults to the left-continuous inverse ``inf{x : F(x) >= p}``.
``side="right"`` gives the literal ``sup{x : F(x) <= p}``. The two differ only
when ``p`` equals one of the cumulative probabilities; the left-continuous form
is the one for which ``quantile(ecdf_eval(x)) == x`` at every support point.
"""
from dataclasses import dataclass
from typing import Literal

import numpy as np

from parity_forge.errors import DomainError, InsufficientDataError


@dataclass(frozen=True)
class Ecdf:
    support: np.ndarray
    cum_probs: np.ndarray
    n: int

    @classmethod
    def from_sample(cls, values) -> "Ecdf":
        values = np.asarray(values)
        if values.size == 0:
            raise InsufficientDataError("cannot build an empirical CDF from an empty sample")
        support, counts = np.unique(values, return_counts=True)
        # integer accumulation: the last entry is n / n == 1.0 exactly
        cum = np.cumsum(counts) / values.size
        return cls(support, cum, int(values.size))

    @property
    def probs(self) -> np.ndarray:
        return np.diff(self.cum_probs, prepend=0.0)

    def cdf(self, x):
        return ecdf_eval(self, x)

    def cdf_left(self, x):
        return ecdf_left(self, x)

    def quantile(self, p, side: Literal["left", "right"] = "left"):
        return quantile(self, p, side)


def _lookup(cum: np.ndarray, k: np.ndarray):
    return np.where(k > 0, cum[np.maximum(k - 1, 0)], 0.0)


def ecdf_eval(e: Ecdf, x):
    """P(X <= x)."""
    k = np.searchsorted(e.support, x, side="right")
    out = _lookup(e.cum_probs, k)
    return out if np.ndim(out) else float(out)


def ecdf_left(e: Ecdf, x):
    """P(X < x), zero at or below the smallest support point."""
    k = np.searchsorted(e.support, x, side="left")
    out = _lookup(e.cum_probs, k)
    return out if np.ndim(out) else float(out)


def quantile(e: Ecdf, p, side: Literal["left", "right"] = "left"):
    """Generalized inverse inf{x : F(x) >= p}.

    ``side="right"`` gives the sup{x : F(x) <= p} form instead; the two differ
    only when p lands exactly on a step of F. p = 0 maps to the smallest support
    point and p = 1 to the largest.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.isnan(p_arr).any() or (p_arr < 0).any() or (p_arr > 1).any():
        raise DomainError("quantile probabilities must lie in [0, 1]")
    k = np.searchsorted(e.cum_probs, p_arr, side=side)
    out = e.support[np.minimum(k, e.support.size - 1)]
    return out if np.ndim(out) else out.item()


def grouped_ecdfs(values, groups) -> dict:
    values, groups = np.asarray(values), np.asarray(groups)
    return {g: Ecdf.from_sample(values[groups == g]) for g in np.unique(groups)}


def wasserstein_qq(source: Ecdf, target: Ecdf, q: float = 1.0) -> float:
    """Exact integral of |F^{<-}(p) - G^{<-}(p)|^q over (0, 1]."""
    breaks = np.union1d(np.union1d(source.cum_probs, target.cum_probs), [0.0])
    lo, hi = breaks[:-1], breaks[1:]
    mid = (lo + hi) / 2
    gap = np.abs(quantile(source, mid) - quantile(target, mid)).astype(float)
    return float(np.sum((hi - lo) * gap**q))
