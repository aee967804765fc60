"""Downstream predictors and the accuracy / parity measures reported on their scores."""
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from parity_forge.condmodels import INTERCEPT, CondModel, DesignMatrix, fit_conditional
from parity_forge.core import Family, OptimizerOptions
from parity_forge.data_load import write_frame
from parity_forge.empirical import Ecdf
from parity_forge.errors import (
    ContractError,
    DomainError,
    EmptyEnsembleError,
    InsufficientDataError,
    ParityForgeError,
    ReplicateError,
    UndefinedMetricError,
)
from parity_forge.helpers.utils import write_json
from parity_forge.rng import keyed_generator, keyed_uniforms

# first key of every predict stream; replicate indices never reach it
STREAM_TAG = 0x50524544
SPLIT_STREAM, BOOTSTRAP_STREAM, FEATURE_STREAM = 1, 2, 3
METRICS = ("acc", "ppv", "npv", "fpr")


class PredictorKind(str, Enum):
    logistic = "logistic"
    random_forest = "random_forest"

    @classmethod
    def parse(cls, value: "PredictorKind | str") -> "PredictorKind":
        return cls("random_forest" if value == "rf" else value)


class ForestParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_trees: int = Field(default=500, ge=1)
    # None means ceil(sqrt(p)) candidate columns per split
    max_features: int | None = Field(default=None, ge=1)
    min_leaf: int = Field(default=5, ge=1)
    max_depth: int | None = Field(default=None, ge=1)


# -----------------------------
# Feature encoding
# -----------------------------
def _is_categorical(s: pd.Series) -> bool:
    return isinstance(s.dtype, pd.CategoricalDtype) or not pd.api.types.is_numeric_dtype(s.dtype)


def _encode(frame: pd.DataFrame, levels: dict[str, tuple] | None = None):
    """Float matrix with categoricals one-hot encoded (first sorted level dropped)."""
    fitted = levels is not None
    levels = {} if levels is None else levels
    cols, names = [], []
    for name in frame.columns:
        s = frame[name]
        if name in levels or (not fitted and _is_categorical(s)):
            lv = levels.setdefault(name, tuple(sorted(s.astype(str).unique())))
            vals = s.astype(str).to_numpy()
            for level in lv[1:]:
                cols.append((vals == level).astype(float))
                names.append(f"{name}[{level}]")
        else:
            cols.append(s.to_numpy(dtype=float))
            names.append(name)
    X = np.column_stack(cols) if cols else np.empty((len(frame), 0))
    return X, names, levels


# -----------------------------
# Decision trees
# -----------------------------
@dataclass(frozen=True)
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf and ``value`` is its class-1 fraction."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(self.depth):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[inner]] <= self.threshold[node[inner]]
            node[rows] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])
        return self.value[node]


def _best_split(X: np.ndarray, y: np.ndarray, w: np.ndarray, candidates, min_leaf: int):
    W, P = w.sum(), (w * y).sum()
    best_imp, best = 2.0 * P * (W - P) / W - 1e-12 * W, None
    for f in candidates:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        # integer weights and 0/1 labels keep these sums exact
        cw = np.cumsum(w[order])
        cp = np.cumsum((w * y)[order])
        b = np.flatnonzero(xs[:-1] < xs[1:])
        if b.size == 0:
            continue
        WL, PL = cw[b], cp[b]
        WR, PR = W - WL, P - PL
        ok = (WL >= min_leaf) & (WR >= min_leaf)
        if not ok.any():
            continue
        b, WL, PL, WR, PR = b[ok], WL[ok], PL[ok], WR[ok], PR[ok]
        imp = 2.0 * PL * (WL - PL) / WL + 2.0 * PR * (WR - PR) / WR
        k = int(np.argmin(imp))
        if imp[k] < best_imp:
            best_imp, best = imp[k], (int(f), float((xs[b[k]] + xs[b[k] + 1]) / 2))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, w: np.ndarray, hp: ForestParams, rng: np.random.Generator) -> Tree:
    p = X.shape[1]
    mtry = min(p, hp.max_features or math.ceil(math.sqrt(p)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node() -> int:
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    max_depth = 0
    stack = [(new_node(), np.flatnonzero(w > 0), 0)]
    while stack:
        node, idx, depth = stack.pop()
        max_depth = max(max_depth, depth)
        W, P = w[idx].sum(), (w[idx] * y[idx]).sum()
        value[node] = P / W
        if P == 0 or P == W or W < 2 * hp.min_leaf or (hp.max_depth is not None and depth >= hp.max_depth):
            continue
        candidates = rng.choice(p, size=mtry, replace=False)
        split = _best_split(X[idx], y[idx], w[idx], candidates, hp.min_leaf)
        if split is None:
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(), new_node()
        stack.append((right[node], idx[~mask], depth + 1))
        stack.append((left[node], idx[mask], depth + 1))
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold), np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64), np.asarray(value), max_depth)


def bootstrap_weights(seed: int, tree: int, row_keys: np.ndarray) -> np.ndarray:
    """Poisson(1) resampling weights looked up by row key, so row order does not matter."""
    u = keyed_uniforms(seed, STREAM_TAG, BOOTSTRAP_STREAM, tree, n=int(row_keys.max()) + 1)
    return stats.poisson.ppf(u[row_keys], 1.0)


# -----------------------------
# Predictors
# -----------------------------
@dataclass
class Predictor:
    kind: PredictorKind
    input_columns: list[str]
    encoded_columns: list[str]
    levels: dict = field(default_factory=dict)
    model: CondModel | None = None
    trees: list[Tree] = field(default_factory=list, repr=False)
    hp: ForestParams | None = None

    def _matrix(self, frame: pd.DataFrame) -> np.ndarray:
        missing = [c for c in self.input_columns if c not in frame.columns]
        if missing:
            raise ContractError(f"prediction frame lacks columns: {', '.join(missing)}")
        X, names, _ = _encode(frame[self.input_columns], dict(self.levels))
        return pd.DataFrame(X, columns=names).reindex(columns=self.encoded_columns, fill_value=0.0).to_numpy()

    def predict_proba(self, frame: pd.DataFrame) -> np.ndarray:
        X = self._matrix(frame)
        if self.kind == PredictorKind.logistic:
            rows = DesignMatrix(np.column_stack([np.ones(len(X)), X]), self.model.design_columns)
            return 1.0 - self.model.cdf(0.0, rows)
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def fit_predictor(kind: PredictorKind | str, features: pd.DataFrame, y, hp: ForestParams | OptimizerOptions | None = None,
                  seed: int = 0, protected=(), row_keys=None, threads: int = 1) -> Predictor:
    """Fit a logistic regression or a bagged Gini forest predicting a binary ``y``."""
    kind = PredictorKind.parse(kind)
    leaked = [c for c in features.columns if c in set(protected)]
    if leaked:
        raise ContractError(f"protected columns cannot be used as predictors: {', '.join(leaked)}")
    y = np.asarray(y, dtype=float)
    if y.size != len(features):
        raise ContractError(f"{len(features)} feature rows but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("predictors need a 0/1 response")
    X, names, levels = _encode(features)

    if kind == PredictorKind.logistic:
        keep = [j for j in range(X.shape[1]) if np.ptp(X[:, j]) > 0]
        names = [names[j] for j in keep]
        rows = DesignMatrix(np.column_stack([np.ones(len(X)), X[:, keep]]), (INTERCEPT, *names))
        opts = hp if isinstance(hp, OptimizerOptions) else None
        model = fit_conditional(Family.logistic_binary, y, rows, opts)
        return Predictor(kind, list(features.columns), names, levels, model=model)

    hp = hp if isinstance(hp, ForestParams) else ForestParams()
    keys = np.arange(y.size) if row_keys is None else np.asarray(row_keys, dtype=np.int64)
    if keys.size != y.size or (keys < 0).any() or np.unique(keys).size != keys.size:
        raise ContractError("row keys must be distinct non-negative integers, one per row")
    y_int = y.astype(np.int64)

    def one_tree(t: int) -> Tree:
        w = bootstrap_weights(seed, t, keys)
        return grow_tree(X, y_int, w, hp, keyed_generator(seed, STREAM_TAG, FEATURE_STREAM, t))

    trees = Parallel(n_jobs=threads, prefer="threads")(delayed(one_tree)(t) for t in range(hp.n_trees))
    logger.debug(f"grew {hp.n_trees} trees on {y.size:,} rows x {X.shape[1]} columns")
    return Predictor(kind, list(features.columns), names, levels, trees=trees, hp=hp)


def predict_ensemble(kind: PredictorKind | str, ensemble, y, hp=None, seed: int = 0, train=None,
                     threads: int = 1, features: list[str] | None = None) -> np.ndarray:
    """Fit one predictor per replicate (on ``train`` rows) and average the replicate scores for every row."""
    if ensemble.M == 0:
        raise EmptyEnsembleError("ensemble holds no replicates")
    features = ensemble.features if features is None else list(features)
    leaked = [c for c in features if c in ensemble.protected or c == ensemble.response]
    if leaked:
        raise ContractError(f"protected or response columns cannot be used as predictors: {', '.join(leaked)}")
    y = np.asarray(y, dtype=float)
    train = np.arange(y.size) if train is None else np.asarray(train)
    if train.dtype == bool:
        train = np.flatnonzero(train)
    total = np.zeros(y.size)
    for m in range(ensemble.M):
        frame = ensemble.replicate_dataset(m).frame
        unknown = [c for c in features if c not in frame.columns]
        if unknown:
            raise ContractError(f"unknown predictor columns: {', '.join(unknown)}")
        X = frame[features]
        try:
            pred = fit_predictor(kind, X.iloc[train], y[train], hp, seed,
                                 protected=ensemble.protected, row_keys=train, threads=threads)
            total += pred.predict_proba(X)
        except ParityForgeError as e:
            raise ReplicateError(e, m + 1) from e
        logger.debug(f"replicate {m + 1}/{ensemble.M}: predictor fitted")
    return total / ensemble.M


def stratified_split(labels, seed: int = 0) -> np.ndarray:
    """Boolean train mask: half of each class (rounded down), chosen by keyed uniforms."""
    labels = np.asarray(labels)
    u = keyed_uniforms(seed, STREAM_TAG, SPLIT_STREAM, n=labels.size)
    train = np.zeros(labels.size, dtype=bool)
    for level in np.unique(labels):
        idx = np.flatnonzero(labels == level)
        chosen = idx[np.argsort(u[idx], kind="stable")[: idx.size // 2]]
        train[chosen] = True
    return train


# -----------------------------
# Accuracy
# -----------------------------
@dataclass(frozen=True)
class RocCurve:
    points: pd.DataFrame
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("ROC/AUC needs both classes among the labels")
    ranks = stats.rankdata(scores)
    auc = (ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)

    thresholds = np.unique(scores)[::-1]
    order = np.searchsorted(-thresholds, -scores)
    tp = np.bincount(order[pos], minlength=thresholds.size).cumsum()
    fp = np.bincount(order[~pos], minlength=thresholds.size).cumsum()
    points = pd.DataFrame({
        "threshold": np.concatenate([[np.inf], thresholds]),
        "fpr": np.concatenate([[0.0], fp / n0]),
        "tpr": np.concatenate([[0.0], tp / n1]),
    })
    return RocCurve(points, float(auc))


@dataclass
class GroupMetrics:
    table: pd.DataFrame
    mad: dict[str, float]
    threshold: float
    warnings: list[str] = field(default_factory=list)


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def group_metrics(scores, labels, groups, threshold: float = 0.5) -> GroupMetrics:
    """Confusion-matrix ratios per group, rows classified positive when ``score >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels).astype(int)
    groups = np.asarray(groups, dtype=object)
    pred = scores >= threshold
    rows, warnings = [], []
    for g in sorted(np.unique(groups), key=str):
        i = groups == g
        tp = int(np.sum(pred[i] & (labels[i] == 1)))
        fp = int(np.sum(pred[i] & (labels[i] == 0)))
        tn = int(np.sum(~pred[i] & (labels[i] == 0)))
        fn = int(np.sum(~pred[i] & (labels[i] == 1)))
        row = {"group": str(g), "n": int(i.sum()), "tp": tp, "fp": fp, "tn": tn, "fn": fn,
               "acc": (tp + tn) / i.sum(), "ppv": _ratio(tp, tp + fp), "npv": _ratio(tn, tn + fn),
               "fpr": _ratio(fp, fp + tn)}
        for metric in METRICS:
            if np.isnan(row[metric]):
                msg = f"group '{g}': {metric} undefined (empty denominator)"
                logger.warning(msg)
                warnings.append(msg)
        rows.append(row)
    table = pd.DataFrame(rows).set_index("group")
    mad = {}
    for metric in METRICS:
        vals = table[metric].dropna().to_numpy()
        mad[metric] = float(np.mean(np.abs(vals - np.median(vals)))) if vals.size else float("nan")
    return GroupMetrics(table, mad, threshold, warnings)


# -----------------------------
# Parity
# -----------------------------
def _usable_groups(scores: np.ndarray, groups: np.ndarray, warnings: list[str]) -> list:
    usable = []
    for g in sorted(np.unique(groups), key=str):
        if np.sum(groups == g) < 2:
            msg = f"group '{g}' has a single score; excluded from the parity gap"
            logger.warning(msg)
            warnings.append(msg)
        else:
            usable.append(g)
    return usable


def parity_gap(scores, groups, warnings: list[str] | None = None) -> float:
    """Largest two-sample KS distance between the score distributions of any two groups."""
    scores, groups = np.asarray(scores, dtype=float), np.asarray(groups, dtype=object)
    warnings = [] if warnings is None else warnings
    usable = _usable_groups(scores, groups, warnings)
    if len(usable) < 2:
        raise InsufficientDataError("parity gap needs at least two groups with two or more scores")
    return max(float(stats.ks_2samp(scores[groups == a], scores[groups == b]).statistic)
               for a, b in combinations(usable, 2))


def _grid(scores: np.ndarray, n_points: int) -> np.ndarray:
    lo, hi = float(scores.min()), float(scores.max())
    if 0.0 <= lo and hi <= 1.0:
        lo, hi = 0.0, 1.0
    return np.linspace(lo, hi, n_points)


def score_cdf_grid(scores, groups, n_points: int = 101) -> pd.DataFrame:
    scores, groups = np.asarray(scores, dtype=float), np.asarray(groups, dtype=object)
    grid = _grid(scores, n_points)
    parts = [pd.DataFrame({"group": str(g), "x": grid, "cdf": Ecdf.from_sample(scores[groups == g]).cdf(grid)})
             for g in sorted(np.unique(groups), key=str)]
    return pd.concat(parts, ignore_index=True)


def score_density_grid(scores, groups, n_points: int = 101, warnings: list[str] | None = None) -> pd.DataFrame:
    """Gaussian kernel density per group, Scott's rule bandwidth."""
    scores, groups = np.asarray(scores, dtype=float), np.asarray(groups, dtype=object)
    grid = _grid(scores, n_points)
    parts = []
    for g in sorted(np.unique(groups), key=str):
        s = scores[groups == g]
        if np.unique(s).size < 2:
            msg = f"group '{g}': fewer than two distinct scores, no density estimate"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        parts.append(pd.DataFrame({"group": str(g), "x": grid,
                                   "density": stats.gaussian_kde(s, bw_method="scott")(grid)}))
    return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=["group", "x", "density"])


@dataclass
class ParityReport:
    gap: float
    roc: RocCurve
    metrics: GroupMetrics
    cdf_grid: pd.DataFrame
    density_grid: pd.DataFrame
    warnings: list[str] = field(default_factory=list)

    @property
    def auc(self) -> float:
        return self.roc.auc

    def to_dict(self) -> dict:
        return {
            "gap": self.gap,
            "auc": self.auc,
            "threshold": self.metrics.threshold,
            "groups": self.metrics.table.reset_index().to_dict(orient="records"),
            "mad": self.metrics.mad,
            "warnings": self.warnings + self.metrics.warnings,
        }

    def export(self, out_dir: str | os.PathLike, stem: str = "parity") -> list[Path]:
        out_dir = Path(out_dir)
        return [
            write_json(out_dir / f"{stem}.json", self.to_dict()),
            write_frame(self.roc.points, out_dir / f"{stem}.roc.csv"),
            write_frame(self.metrics.table.reset_index(), out_dir / f"{stem}.metrics.csv"),
            write_frame(self.cdf_grid, out_dir / f"{stem}.cdf.csv"),
            write_frame(self.density_grid, out_dir / f"{stem}.density.csv"),
        ]


def build_parity_report(scores, labels, groups, threshold: float = 0.5) -> ParityReport:
    warnings: list[str] = []
    gap = parity_gap(scores, groups, warnings)
    return ParityReport(
        gap=gap,
        roc=roc_auc(scores, labels),
        metrics=group_metrics(scores, labels, groups, threshold),
        cdf_grid=score_cdf_grid(scores, groups),
        density_grid=score_density_grid(scores, groups, warnings=warnings),
        warnings=warnings,
    )

