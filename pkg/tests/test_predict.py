import dataclasses

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from parity_forge.condmodels import INTERCEPT
from parity_forge.core import ChainPlan, Family, StepSpec
from parity_forge.errors import ContractError, DivergenceError, DomainError, InsufficientDataError, UndefinedMetricError
from parity_forge.predict import (
    ForestParams,
    PredictorKind,
    build_parity_report,
    fit_predictor,
    group_metrics,
    parity_gap,
    predict_ensemble,
    roc_auc,
    stratified_split,
)
from parity_forge.transform import transform_none

SMALL_FOREST = ForestParams(n_trees=10, min_leaf=2)


def _none_ensemble(ds):
    plan = ChainPlan(ordering=["x1", "x2"], steps={"x1": StepSpec(family=Family.gaussian_linear),
                                                     "x2": StepSpec(family=Family.poisson)})
    return transform_none(ds, plan)


# -----------------------------
# ROC / AUC
# -----------------------------
def test_auc_counts_concordant_pairs():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == pytest.approx(0.75)


def test_auc_extremes():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]).auc == 0.5


def test_auc_equals_trapezoid_of_points(rng):
    scores = np.round(rng.random(300), 2)
    labels = (rng.random(300) < scores).astype(int)
    roc = roc_auc(scores, labels)
    fpr, tpr = roc.points["fpr"].to_numpy(), roc.points["tpr"].to_numpy()
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    assert roc.auc == pytest.approx(area, abs=1e-12)
    assert (fpr[0], tpr[0]) == (0.0, 0.0)
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)


def test_auc_invariant_under_increasing_transform(rng):
    scores = rng.random(200)
    labels = rng.integers(0, 2, 200)
    assert roc_auc(np.log(scores), labels).auc == roc_auc(scores, labels).auc


def test_auc_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.2, 0.3], [1, 1])


# -----------------------------
# Group metrics
# -----------------------------
def _confusion(group, tp, fp, tn, fn):
    scores = [0.9] * (tp + fp) + [0.1] * (tn + fn)
    labels = [1] * tp + [0] * fp + [0] * tn + [1] * fn
    return scores, labels, [group] * len(scores)


def test_group_metrics_from_counts():
    s1, l1, g1 = _confusion("g1", 3, 1, 4, 2)
    s2, l2, g2 = _confusion("g2", 2, 2, 5, 1)
    gm = group_metrics(s1 + s2, l1 + l2, g1 + g2)
    t = gm.table
    assert t.loc["g1", "acc"] == pytest.approx(0.7)
    assert t.loc["g1", "ppv"] == pytest.approx(0.75)
    assert t.loc["g1", "npv"] == pytest.approx(2 / 3)
    assert t.loc["g1", "fpr"] == pytest.approx(0.2)
    assert t.loc["g2", "acc"] == pytest.approx(0.7)
    assert t.loc["g2", "ppv"] == pytest.approx(0.5)
    assert t.loc["g2", "npv"] == pytest.approx(5 / 6)
    assert t.loc["g2", "fpr"] == pytest.approx(2 / 7)
    assert list(t.loc["g1", ["tp", "fp", "tn", "fn"]]) == [3, 1, 4, 2]
    assert gm.mad["acc"] == pytest.approx(0.0)
    assert gm.mad["ppv"] == pytest.approx(0.125)


def test_group_metrics_perfect_single_group():
    gm = group_metrics([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], ["a"] * 4)
    row = gm.table.loc["a"]
    assert (row["acc"], row["ppv"], row["npv"], row["fpr"]) == (1.0, 1.0, 1.0, 0.0)
    assert all(v == 0.0 for v in gm.mad.values())


def test_threshold_is_inclusive():
    gm = group_metrics([0.5, 0.4], [1, 0], ["a", "a"])
    assert gm.table.loc["a", "tp"] == 1


def test_undefined_ppv_excluded_from_mad():
    s1, l1, g1 = _confusion("g1", 0, 0, 4, 2)
    s2, l2, g2 = _confusion("g2", 2, 2, 5, 1)
    gm = group_metrics(s1 + s2, l1 + l2, g1 + g2)
    assert np.isnan(gm.table.loc["g1", "ppv"])
    assert gm.mad["ppv"] == 0.0
    assert any("ppv undefined" in w for w in gm.warnings)


@pytest.mark.parametrize("threshold", [0.0, 1.0, -0.2, 1.5])
def test_threshold_domain(threshold):
    with pytest.raises(DomainError):
        group_metrics([0.5], [1], ["a"], threshold=threshold)


# -----------------------------
# Parity gap
# -----------------------------
def test_parity_gap_extremes():
    assert parity_gap([0.1, 0.2, 0.3, 0.1, 0.2, 0.3], list("aaabbb")) == 0.0
    assert parity_gap([0.1, 0.2, 0.8, 0.9], list("aabb")) == 1.0


def test_parity_gap_takes_maximum_over_pairs():
    scores = [0.1, 0.2, 0.1, 0.2, 0.8, 0.9]
    assert parity_gap(scores, list("aabbcc")) == 1.0


def test_parity_gap_excludes_singletons():
    warnings = []
    assert parity_gap([0.1, 0.2, 0.1, 0.2, 0.9], list("aabbc"), warnings) == 0.0
    assert len(warnings) == 1 and "'c'" in warnings[0]
    with pytest.raises(InsufficientDataError):
        parity_gap([0.1, 0.2, 0.9], list("aac"))


def test_parity_report_exports(tmp_path, rng):
    scores = rng.random(200)
    labels = (rng.random(200) < scores).astype(int)
    groups = np.where(rng.random(200) < 0.5, "a", "b")
    report = build_parity_report(scores, labels, groups)
    paths = report.export(tmp_path, "parity.mutual.rf")
    assert [p.name for p in paths] == ["parity.mutual.rf.json", "parity.mutual.rf.roc.csv",
                                       "parity.mutual.rf.metrics.csv", "parity.mutual.rf.cdf.csv",
                                       "parity.mutual.rf.density.csv"]
    assert all(p.exists() for p in paths)
    assert 0.0 <= report.auc <= 1.0
    assert set(report.cdf_grid["group"]) == {"a", "b"}
    assert report.cdf_grid["x"].min() == 0.0 and report.cdf_grid["x"].max() == 1.0


# -----------------------------
# Predictors
# -----------------------------
def test_forest_fits_separable_training_data(rng):
    x = np.r_[rng.uniform(-2, -1, 100), rng.uniform(1, 2, 100)]
    y = (x > 0).astype(int)
    features = pd.DataFrame({"x": x, "noise": rng.normal(size=200)})
    pred = fit_predictor("rf", features, y, ForestParams(n_trees=5, min_leaf=1, max_features=2))
    assert pred.kind == PredictorKind.random_forest
    np.testing.assert_array_equal(pred.predict_proba(features) >= 0.5, y == 1)


def test_forest_ignores_row_order(rng):
    n = 200
    features = pd.DataFrame({"a": rng.normal(size=n), "b": rng.normal(size=n), "c": rng.normal(size=n)})
    y = (rng.random(n) < expit(features["a"] - features["b"])).astype(int)
    perm = rng.permutation(n)
    first = fit_predictor("rf", features, y, SMALL_FOREST, seed=9)
    shuffled = fit_predictor("rf", features.iloc[perm].reset_index(drop=True), y[perm], SMALL_FOREST, seed=9,
                             row_keys=perm)
    np.testing.assert_array_equal(first.predict_proba(features), shuffled.predict_proba(features))


def test_forest_encodes_categoricals(rng):
    n = 120
    features = pd.DataFrame({"colour": rng.choice(["red", "blue", "green"], n), "x": rng.normal(size=n)})
    y = (features["colour"] == "red").astype(int).to_numpy()
    pred = fit_predictor("rf", features, y, SMALL_FOREST)
    assert pred.encoded_columns == ["colour[green]", "colour[red]", "x"]
    scores = pred.predict_proba(features)
    assert scores.min() >= 0 and scores.max() <= 1


def test_logistic_recovers_coefficients(rng):
    n = 5000
    x = rng.normal(size=n)
    y = (rng.random(n) < expit(-0.3 + 0.9 * x)).astype(int)
    pred = fit_predictor(PredictorKind.logistic, pd.DataFrame({"x": x}), y)
    se = pred.model.standard_errors()
    assert abs(pred.model.coefficients[INTERCEPT] + 0.3) < 4 * se[INTERCEPT]
    assert abs(pred.model.coefficients["x"] - 0.9) < 4 * se["x"]
    np.testing.assert_allclose(pred.predict_proba(pd.DataFrame({"x": [0.0]})),
                               expit(pred.model.coefficients[INTERCEPT]))


def test_logistic_separation_raises():
    x = np.repeat([-2.0, -1.0, 1.0, 2.0], 25)
    with pytest.raises(DivergenceError):
        fit_predictor("logistic", pd.DataFrame({"x": x}), (x > 0).astype(int))


def test_predictor_contract_errors(rng):
    frame = pd.DataFrame({"z": rng.integers(0, 2, 10), "x": rng.normal(size=10)})
    with pytest.raises(ContractError, match="protected"):
        fit_predictor("logistic", frame, np.arange(10) % 2, protected=("z",))
    with pytest.raises(ContractError, match="0/1"):
        fit_predictor("logistic", frame[["x"]], np.arange(10))
    with pytest.raises(ContractError, match="row keys"):
        fit_predictor("rf", frame[["x"]], np.arange(10) % 2, SMALL_FOREST, row_keys=np.zeros(10))


# -----------------------------
# Ensemble scores
# -----------------------------
@pytest.mark.parametrize("kind", ["logistic", "rf"])
def test_single_replicate_matches_direct_fit(binary_outcome_ds, kind):
    ens = _none_ensemble(binary_outcome_ds)
    y = binary_outcome_ds.values("y")
    scores = predict_ensemble(kind, ens, y, SMALL_FOREST, seed=4)
    features = binary_outcome_ds.frame[["x1", "x2"]]
    direct = fit_predictor(kind, features, y, SMALL_FOREST, seed=4).predict_proba(features)
    np.testing.assert_allclose(scores, direct)
    assert scores.min() >= 0 and scores.max() <= 1


def test_averaging_replicates_shrinks_score_spread(binary_outcome_ds, rng):
    base = _none_ensemble(binary_outcome_ds)
    y = binary_outcome_ds.values("y")
    n = y.size

    def run(M):
        reps = [pd.DataFrame({"x1": 0.8 * y + rng.normal(size=n), "x2": rng.normal(size=n)}) for _ in range(M)]
        return predict_ensemble("logistic", dataclasses.replace(base, replicates=reps), y)

    single = np.std([run(1) for _ in range(40)], axis=0, ddof=1).mean()
    averaged = np.std([run(5) for _ in range(40)], axis=0, ddof=1).mean()
    assert single / averaged == pytest.approx(np.sqrt(5), rel=0.15)


def test_ensemble_rejects_protected_features(binary_outcome_ds):
    ens = _none_ensemble(binary_outcome_ds)
    with pytest.raises(ContractError, match="z"):
        predict_ensemble("logistic", ens, binary_outcome_ds.values("y"), features=["x1", "z"])


def test_ensemble_scores_held_out_rows(binary_outcome_ds):
    ens = _none_ensemble(binary_outcome_ds)
    y = binary_outcome_ds.values("y")
    train = stratified_split(y, seed=1)
    scores = predict_ensemble("logistic", ens, y, seed=1, train=train)
    assert scores.shape == (binary_outcome_ds.n,)
    assert roc_auc(scores[~train], y[~train]).auc > 0.6


def test_stratified_split_halves_each_class():
    labels = np.r_[np.ones(7, dtype=int), np.zeros(10, dtype=int)]
    train = stratified_split(labels, seed=3)
    assert train[labels == 1].sum() == 3
    assert train[labels == 0].sum() == 5
    np.testing.assert_array_equal(train, stratified_split(labels, seed=3))
