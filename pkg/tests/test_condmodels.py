import json

import numpy as np
import pandas as pd
import pytest
from scipy import stats
from scipy.special import expit, logit

from parity_forge.condmodels import (
    INTERCEPT,
    CondModel,
    DesignMatrix,
    build_design,
    eval_cdf,
    eval_cdf_left,
    fit_conditional,
    fit_empirical_by_group,
    negloglik,
    negloglik_grad,
    parameter_names,
)
from parity_forge.core import Family
from parity_forge.errors import (
    ContractError,
    DegenerateFitError,
    DivergenceError,
    InsufficientDataError,
    UnknownGroupError,
)
from parity_forge.simulation import SimConfig, sim_plan
from parity_forge.transform import chain_transform


def _central_grad(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _design(rng, n, p=2):
    return np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])


# -----------------------------
# Design
# -----------------------------
def test_build_design_one_hot_interactions_and_drops():
    frame = pd.DataFrame({
        "g": ["b", "a", "c", "a", "b"],
        "x": [0.5, 1.0, -1.0, 2.0, 0.0],
        "const": [3.0] * 5,
    })
    d = build_design(frame, ["g", "x", "const"], {"g": ("a", "b", "c")}, [("g", "x")])
    assert d.columns == (INTERCEPT, "g[b]", "g[c]", "x", "g[b]:x", "g[c]:x")
    assert d.dropped == ("const",)
    np.testing.assert_array_equal(d.values[:, 1], [1, 0, 0, 0, 1])
    np.testing.assert_allclose(d.values[:, 4], [0.5, 0, 0, 0, 0])


def test_build_design_group_labels():
    frame = pd.DataFrame({"z": [0, 1, 1], "c": [2, 2, 3]})
    d = build_design(frame, ["z"], group_by=["z", "c"])
    assert list(d.groups) == ["0|2", "1|2", "1|3"]


def test_parameter_names():
    assert parameter_names(Family.gaussian_linear, (INTERCEPT, "x")) == [INTERCEPT, "x", "sigma"]
    assert parameter_names(Family.zero_inflated_negbin, (INTERCEPT,), (INTERCEPT,)) == [
        f"inflate:{INTERCEPT}", f"count:{INTERCEPT}", "log_theta"]


# -----------------------------
# Gradients
# -----------------------------
@pytest.mark.parametrize("family", list(Family)[1:])
def test_analytic_gradient_matches_finite_differences(family, rng):
    n = 300
    X = _design(rng, n, 3)
    G = X if family in (Family.zero_inflated_poisson, Family.zero_inflated_negbin) else None
    if family == Family.gaussian_linear:
        y = X @ [1.0, 0.5, -0.2] + rng.normal(size=n)
        params = np.array([0.8, 0.4, -0.1, 0.2])
    elif family == Family.logistic_binary:
        y = (rng.random(n) < 0.4).astype(float)
        params = np.array([-0.2, 0.3, 0.1])
    else:
        y = rng.negative_binomial(2, 0.4, size=n) * (rng.random(n) < 0.7)
        params = np.array([0.3, -0.2, 0.1])
        if G is not None:
            params = np.concatenate([[-0.5, 0.2, 0.1], params])
        if family == Family.zero_inflated_negbin:
            params = np.append(params, np.log(1.5))
    analytic = negloglik_grad(family, params, y, X, G)
    numeric = _central_grad(lambda t: negloglik(family, t, y, X, G), params)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-4


# -----------------------------
# Maximum likelihood
# -----------------------------
def _within_se(model: CondModel, truth: dict, k: float = 3.0):
    se = model.standard_errors()
    for name, value in truth.items():
        assert abs(model.coefficients[name] - value) < k * se[name], (name, model.coefficients[name], se[name])


def test_gaussian_recovers_parameters(rng):
    n = 10_000
    X = _design(rng, n)
    y = X @ [1.0, 2.0] + rng.normal(scale=0.5, size=n)
    m = fit_conditional(Family.gaussian_linear, y, X)
    _within_se(m, {INTERCEPT: 1.0, "x1": 2.0})
    assert m.coefficients["sigma"] == pytest.approx(0.5, abs=0.02)
    assert not m.atomic


def test_poisson_recovers_parameters(rng):
    n = 10_000
    X = _design(rng, n)
    y = rng.poisson(np.exp(X @ [0.5, -0.3]))
    m = fit_conditional(Family.poisson, y, X)
    _within_se(m, {INTERCEPT: 0.5, "x1": -0.3})
    assert m.fit_diagnostics["converged"]


def test_logistic_recovers_parameters(rng):
    n = 10_000
    X = _design(rng, n)
    y = (rng.random(n) < expit(X @ [-0.4, 1.2])).astype(float)
    m = fit_conditional(Family.logistic_binary, y, X)
    _within_se(m, {INTERCEPT: -0.4, "x1": 1.2})


def test_zip_recovers_parameters(rng):
    n = 10_000
    X = _design(rng, n)
    structural = rng.random(n) < expit(X @ [-0.5, 0.4])
    y = np.where(structural, 0, rng.poisson(np.exp(X @ [0.8, 0.3])))
    m = fit_conditional(Family.zero_inflated_poisson, y, X)
    _within_se(m, {f"inflate:{INTERCEPT}": -0.5, "inflate:x1": 0.4, f"count:{INTERCEPT}": 0.8, "count:x1": 0.3})


@pytest.mark.slow
def test_zinb_recovers_parameters(rng):
    n = 10_000
    X = _design(rng, n)
    theta = 2.0
    mu = np.exp(X @ [1.0, 0.3])
    structural = rng.random(n) < expit(X @ [-1.0, 0.5])
    y = np.where(structural, 0, rng.negative_binomial(theta, theta / (theta + mu)))
    m = fit_conditional(Family.zero_inflated_negbin, y, X)
    _within_se(m, {f"inflate:{INTERCEPT}": -1.0, "inflate:x1": 0.5, f"count:{INTERCEPT}": 1.0,
                   "count:x1": 0.3, "log_theta": np.log(theta)})


def test_zip_intercept_only_inflation(rng):
    n = 2000
    X = _design(rng, n)
    y = np.where(rng.random(n) < 0.3, 0, rng.poisson(np.exp(X @ [0.7, 0.2])))
    m = fit_conditional(Family.zero_inflated_poisson, y, X, inflation="intercept")
    assert f"inflate:{INTERCEPT}" in m.coefficients.index
    assert "inflate:x1" not in m.coefficients.index
    assert expit(m.coefficients[f"inflate:{INTERCEPT}"]) == pytest.approx(0.3, abs=0.05)


def _irls(X, y, rounds=50):
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(y.mean())
    for _ in range(rounds):
        mu = np.exp(X @ beta)
        beta = beta + np.linalg.solve((X.T * mu) @ X, X.T @ (y - mu))
    return beta


def test_poisson_with_large_counts_converges_to_the_mle(rng):
    n = 5000
    X = _design(rng, n)
    y = rng.poisson(np.exp(X @ [3.0, 0.8]))
    m = fit_conditional(Family.poisson, y, X)
    assert m.fit_diagnostics["converged"]
    np.testing.assert_allclose(m.coefficients.to_numpy(), _irls(X, y), rtol=1e-6)


def test_chain_fits_converge_on_simulated_data(sim_ds):
    ens = chain_transform(sim_ds, sim_plan(SimConfig(n=600, seed=3, M=1, interaction=True)))
    diag = ens.fit_summaries[0]["x2"]["fit_diagnostics"]
    assert diag["converged"]
    assert diag["method"] == "bfgs+newton"


def test_zero_inflated_fit_fixes_separated_bins_at_zero(rng):
    n = 2000
    x = rng.normal(size=n)
    positive_bin = np.zeros(n)
    positive_bin[:40] = 1.0
    zero_bin = np.zeros(n)
    zero_bin[40:70] = 1.0
    X = DesignMatrix(np.column_stack([np.ones(n), x, positive_bin, zero_bin]),
                     (INTERCEPT, "x", "bin[1]", "bin[2]"))
    structural = rng.random(n) < expit(-0.5 + 0.4 * x)
    y = np.where(structural, 0, rng.poisson(np.exp(0.8 + 0.3 * x))).astype(float)
    y[:40] = rng.poisson(6.0, 40) + 1
    y[40:70] = 0

    m = fit_conditional(Family.zero_inflated_poisson, y, X)
    dropped = m.fit_diagnostics["dropped"]
    assert dropped == {"count": ["bin[2]"], "inflation": ["bin[1]", "bin[2]"]}
    assert m.coefficients["inflate:bin[1]"] == 0.0
    assert m.coefficients["count:bin[2]"] == 0.0
    assert m.coefficients["count:bin[1]"] > 0.5
    assert m.standard_errors()["inflate:bin[1]"] == 0.0
    assert np.all(np.isfinite(m.cdf(y, X)))


def test_poisson_drops_an_all_zero_bin(rng):
    n = 500
    dead = (np.arange(n) < 25).astype(float)
    X = DesignMatrix(np.column_stack([np.ones(n), dead]), (INTERCEPT, "dead"))
    y = np.where(dead == 1, 0, rng.poisson(2.0, n))
    m = fit_conditional(Family.poisson, y, X)
    assert m.fit_diagnostics["dropped"]["count"] == ["dead"]
    assert m.coefficients["dead"] == 0.0
    assert np.exp(m.coefficients[INTERCEPT]) == pytest.approx(y.mean())


# -----------------------------
# Failure modes
# -----------------------------
def test_logistic_separation_diverges():
    x = np.repeat([-2.0, -1.0, 1.0, 2.0], 25)
    X = np.column_stack([np.ones(x.size), x])
    with pytest.raises(DivergenceError):
        fit_conditional(Family.logistic_binary, (x > 0).astype(float), X)


def test_degenerate_responses():
    X = np.ones((10, 1))
    with pytest.raises(DegenerateFitError, match="all-zero"):
        fit_conditional(Family.zero_inflated_poisson, np.zeros(10), X)
    with pytest.raises(DegenerateFitError, match="constant"):
        fit_conditional(Family.logistic_binary, np.ones(10), X)


def test_response_must_fit_family():
    X = np.ones((3, 1))
    with pytest.raises(ContractError, match="non-negative integer"):
        fit_conditional(Family.poisson, [0.5, 1.0, 2.0], X)
    with pytest.raises(ContractError, match="0/1"):
        fit_conditional(Family.logistic_binary, [0.0, 2.0, 1.0], X)


def test_exact_gaussian_fit_is_degenerate():
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x])
    m = fit_conditional(Family.gaussian_linear, 1.0 + 2.0 * x, X)
    assert m.fit_diagnostics["degenerate"]
    assert m.coefficients["sigma"] == 0.0
    rows = DesignMatrix.from_array(X)
    np.testing.assert_array_equal(m.cdf(1.0 + 2.0 * x + 1e-9, rows), np.ones(10))
    np.testing.assert_array_equal(m.cdf(1.0 + 2.0 * x - 1e-9, rows), np.zeros(10))


def test_design_mismatch_rejected(rng):
    X = _design(rng, 50)
    m = fit_conditional(Family.gaussian_linear, rng.normal(size=50), X)
    with pytest.raises(ContractError):
        m.cdf(0.0, DesignMatrix(np.ones((3, 1)), (INTERCEPT,)))


# -----------------------------
# CDF contract
# -----------------------------
def test_zero_inflated_cdf_at_zero():
    rows = DesignMatrix(np.ones((1, 1)), (INTERCEPT,))
    coef = pd.Series({f"inflate:{INTERCEPT}": logit(0.3), f"count:{INTERCEPT}": np.log(2.0)})
    zip_model = CondModel(Family.zero_inflated_poisson, coef, (INTERCEPT,))
    assert zip_model.cdf(0, rows)[0] == pytest.approx(0.3 + 0.7 * np.exp(-2.0))
    assert zip_model.cdf_left(0, rows)[0] == 0.0
    assert zip_model.cdf(-1, rows)[0] == 0.0
    assert zip_model.pmf(3, rows)[0] == pytest.approx(0.7 * stats.poisson.pmf(3, 2.0))

    coef = pd.concat([coef, pd.Series({"log_theta": np.log(1.5)})])
    zinb = CondModel(Family.zero_inflated_negbin, coef, (INTERCEPT,))
    expected = 0.3 + 0.7 * stats.nbinom.cdf(4, 1.5, 1.5 / 3.5)
    assert zinb.cdf(4, rows)[0] == pytest.approx(expected)


def test_count_pmf_sums_to_one(rng):
    X = _design(rng, 200)
    m = fit_conditional(Family.poisson, rng.poisson(2.0, 200), X)
    rows = DesignMatrix.from_array(X[:5])
    total = sum(m.pmf(k, rows) for k in range(60))
    np.testing.assert_allclose(total, 1.0, atol=1e-10)


def test_logistic_cdf_is_a_step():
    rows = DesignMatrix(np.ones((1, 1)), (INTERCEPT,))
    m = CondModel(Family.logistic_binary, pd.Series({INTERCEPT: logit(0.8)}), (INTERCEPT,))
    np.testing.assert_allclose([m.cdf(x, rows)[0] for x in (-1, 0, 0.5, 1)], [0, 0.2, 0.2, 1])
    np.testing.assert_allclose([m.cdf_left(x, rows)[0] for x in (0, 1, 2)], [0, 0.2, 1])


def test_gaussian_has_no_left_limit(rng):
    X = _design(rng, 30)
    m = fit_conditional(Family.gaussian_linear, rng.normal(size=30), X)
    with pytest.raises(ContractError, match="atomic"):
        m.cdf_left(0.0, DesignMatrix.from_array(X))


def test_logpmf_agrees_with_cdf_differences():
    rows = DesignMatrix(np.ones((1, 1)), (INTERCEPT,))
    coef = pd.Series({f"inflate:{INTERCEPT}": logit(0.3), f"count:{INTERCEPT}": np.log(2.0)})
    zip_model = CondModel(Family.zero_inflated_poisson, coef, (INTERCEPT,))
    for k in (0, 1, 4):
        assert zip_model.logpmf(k, rows)[0] == pytest.approx(np.log(zip_model.pmf(k, rows)[0]))
    assert zip_model.logpmf(1.5, rows)[0] == -np.inf
    assert zip_model.logpmf(-1, rows)[0] == -np.inf

    logistic = CondModel(Family.logistic_binary, pd.Series({INTERCEPT: logit(0.8)}), (INTERCEPT,))
    np.testing.assert_allclose(np.exp([logistic.logpmf(v, rows)[0] for v in (0, 1)]), [0.2, 0.8])


def test_logpmf_sees_far_tail_mass():
    rows = DesignMatrix(np.ones((1, 1)), (INTERCEPT,))
    m = CondModel(Family.poisson, pd.Series({INTERCEPT: np.log(8.0)}), (INTERCEPT,))
    assert m.pmf(53, rows)[0] == 0.0
    assert m.logpmf(53, rows)[0] == pytest.approx(stats.poisson.logpmf(53, 8.0))
    assert np.isfinite(m.logpmf(53, rows)[0])


# -----------------------------
# Empirical-by-group
# -----------------------------
def test_empirical_by_group():
    m = fit_empirical_by_group([1, 2, 3, 10, 20, 20], ["a", "a", "a", "b", "b", "b"])
    rows = DesignMatrix.from_groups(["a", "b", "b"])
    np.testing.assert_allclose(eval_cdf(m, [2, 20, 19], rows), [2 / 3, 1.0, 1 / 3])
    np.testing.assert_allclose(eval_cdf_left(m, [2, 20, 19], rows), [1 / 3, 1 / 3, 1 / 3])
    assert m.atomic


def test_empirical_by_group_guards():
    with pytest.raises(InsufficientDataError, match="'b'"):
        fit_empirical_by_group([1.0, 2.0, 3.0], ["a", "a", "b"])
    m = fit_empirical_by_group([1.0, 2.0, 3.0, 4.0], ["a", "a", "b", "b"])
    assert not m.atomic
    with pytest.raises(UnknownGroupError):
        m.cdf(1.0, DesignMatrix.from_groups(["c"]))
    with pytest.raises(KeyError):
        m.cdf(1.0, DesignMatrix.from_groups(["c"]))
    with pytest.raises(ContractError):
        m.standard_errors()


# -----------------------------
# Provenance
# -----------------------------
def test_dict_round_trip(rng):
    X = _design(rng, 300)
    y = np.where(rng.random(300) < 0.2, 0, rng.poisson(1.5, 300))
    m = fit_conditional(Family.zero_inflated_poisson, y, X)
    back = CondModel.from_dict(json.loads(json.dumps(m.to_dict())))
    rows = DesignMatrix.from_array(X)
    np.testing.assert_allclose(back.cdf(y, rows), m.cdf(y, rows))
    np.testing.assert_allclose(back.standard_errors(), m.standard_errors())

    e = fit_empirical_by_group([1, 2, 2, 5], ["a", "a", "b", "b"])
    e_back = CondModel.from_dict(json.loads(json.dumps(e.to_dict())))
    groups = DesignMatrix.from_groups(["a", "b"])
    np.testing.assert_allclose(e_back.cdf([1, 2], groups), e.cdf([1, 2], groups))
