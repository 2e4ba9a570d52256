import math

import numpy as np
import pytest

from cwr.data import Backend, ClusterDataset, CompositeOutcome, SubjectRecord
from cwr.errors import ExtremePropensityError, SeparationError, SingularDesignError, UnknownClusterError
from cwr.propensity import (
    PsModelFit,
    check_propensities,
    fit_fixed_effects,
    fit_logistic,
    fit_random_intercept,
    initial_weights,
    inverse_link,
    predict_ps,
    predict_ps_dataset,
)


def dataset(cluster, z, x):
    n = len(z)
    t = np.arange(1, n + 1, dtype=float)
    return ClusterDataset(cluster, z, t, [0] * n, t, [0] * n, np.asarray(x, dtype=float).reshape(n, -1))


def binary_loglik(D, y, beta, link="logit"):
    """Log-likelihood at a batch of coefficient vectors (rows of ``beta``)."""
    p = inverse_link(beta @ D.T, link)
    p = np.clip(p, 1e-300, 1 - 1e-16)
    return np.sum(np.where(y == 1, np.log(p), np.log1p(-p)), axis=1)


def grid_maximiser(D, y, center, half_width=3.0, points=9, levels=12, link="logit"):
    """Coarse-to-fine grid search: re-centre and shrink the box around the best point."""
    center = np.asarray(center, dtype=float)
    width = np.full(center.size, half_width)
    for _ in range(levels):
        axes = [np.linspace(c - w, c + w, points) for c, w in zip(center, width)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, center.size)
        center = grid[np.argmax(binary_loglik(D, y, grid, link))]
        width = width / 3.0
    return center


@pytest.mark.parametrize("share, expected", [(0.5, 0.0), (0.3, math.log(0.3 / 0.7))])
def test_intercept_only_closed_form(share, expected):
    n = 100
    z = np.zeros(n, dtype=int)
    z[: int(share * n)] = 1
    ds = ClusterDataset([0] * n, z, np.ones(n), [0] * n, np.ones(n), [0] * n, np.zeros((n, 0)))
    fit = fit_logistic(ds)
    assert fit.intercept == pytest.approx(expected, abs=1e-10)


def test_logistic_matches_grid_oracle():
    rng = np.random.default_rng(40)
    x = rng.normal(size=(40, 2))
    z = (rng.random(40) < 1 / (1 + np.exp(-(0.3 + x @ [0.8, -0.6])))).astype(int)
    fit = fit_logistic(dataset([0] * 40, z, x))
    D = np.column_stack([np.ones(40), x])
    oracle = grid_maximiser(D, z, np.zeros(3))
    np.testing.assert_allclose(fit.coefficients, oracle, atol=1e-4)
    assert fit.converged


def test_cloglog_matches_grid_oracle():
    rng = np.random.default_rng(41)
    x = rng.normal(size=(60, 1))
    z = (rng.random(60) < 0.5).astype(int)
    fit = fit_logistic(dataset([0] * 60, z, x), link="cloglog")
    D = np.column_stack([np.ones(60), x])
    oracle = grid_maximiser(D, z, np.zeros(2), link="cloglog")
    np.testing.assert_allclose(fit.coefficients, oracle, atol=1e-4)


def test_fixed_effects_closed_form():
    z = [1] * 9 + [0] + [1] + [0] * 9
    fit = fit_fixed_effects(dataset([0] * 10 + [1] * 10, z, np.zeros((20, 0))))
    logit = lambda p: math.log(p / (1 - p))
    assert fit.cluster_effects[0] == 0.0
    assert fit.cluster_effects[0] - fit.cluster_effects[1] == pytest.approx(logit(0.9) - logit(0.1), abs=1e-8)


def test_fixed_effects_identical_clusters():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(15, 1))
    z = (rng.random(15) < 0.5).astype(int)
    z[:2] = [0, 1]
    fit = fit_fixed_effects(dataset([0] * 15 + [1] * 15, np.tile(z, 2), np.tile(x, (2, 1))))
    assert fit.cluster_effects[1] == pytest.approx(0.0, abs=1e-10)


def test_fixed_effects_matches_grid_oracle():
    rng = np.random.default_rng(44)
    cluster = np.repeat([0, 1, 2], 20)
    x = rng.normal(size=(60, 1))
    z = (rng.random(60) < 1 / (1 + np.exp(-(x[:, 0] + np.array([0.0, 1.0, -1.0])[cluster])))).astype(int)
    fit = fit_fixed_effects(dataset(cluster, z, x))
    D = np.column_stack([np.ones(60), x, cluster == 1, cluster == 2]).astype(float)
    oracle = grid_maximiser(D, z, np.zeros(4), levels=13)
    got = np.concatenate([fit.coefficients, [fit.cluster_effects[1], fit.cluster_effects[2]]])
    np.testing.assert_allclose(got, oracle, atol=1e-4)


def test_fixed_effects_separation_names_cluster():
    cluster = [0] * 4 + [1] * 4
    z = [1, 0, 1, 0, 1, 1, 1, 1]
    with pytest.raises(SeparationError) as info:
        fit_fixed_effects(dataset(cluster, z, np.zeros((8, 0))))
    assert info.value.cluster == 1


def test_collinear_design_rejected():
    x = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(SingularDesignError):
        fit_logistic(dataset([0] * 10, [0, 1] * 5, x))


def _re_data(seed, sd, m=40, n_i=25):
    rng = np.random.default_rng(seed)
    cluster = np.repeat(np.arange(m), n_i)
    x = rng.normal(size=(m * n_i, 1))
    b = rng.normal(scale=sd, size=m)
    z = (rng.random(m * n_i) < 1 / (1 + np.exp(-(0.2 + 0.5 * x[:, 0] + b[cluster])))).astype(int)
    return dataset(cluster, z, x)


def test_random_intercept_zero_variance():
    fit = fit_random_intercept(_re_data(5, 0.0))
    assert fit.re_variance < 0.05


def test_random_intercept_recovers_variance():
    fit = fit_random_intercept(_re_data(6, 1.0, m=80))
    assert 0.5 < fit.re_variance < 1.8
    assert fit.slopes[0] == pytest.approx(0.5, abs=0.15)


def test_random_intercept_identical_clusters():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(30, 1))
    z = (rng.random(30) < 0.5).astype(int)
    ds = dataset(np.repeat(np.arange(4), 30), np.tile(z, 4), np.tile(x, (4, 1)))
    fit = fit_random_intercept(ds)
    modes = np.array(list(fit.cluster_effects.values()))
    np.testing.assert_allclose(modes, modes[0], atol=1e-8)


def test_random_intercept_shrinks_towards_zero():
    rng = np.random.default_rng(9)
    shifts = np.array([-1.5, -0.7, 0.4, 1.2, 2.0, -0.2])
    cluster = np.repeat(np.arange(6), 60)
    z = (rng.random(360) < 1 / (1 + np.exp(-shifts[cluster]))).astype(int)
    ds = dataset(cluster, z, np.zeros((360, 0)))
    re = fit_random_intercept(ds)
    fe = fit_fixed_effects(ds)
    for label in ds.labels:
        unshrunk = fe.intercept + fe.cluster_effects[label] - re.intercept
        mode = re.cluster_effects[label]
        assert 0 < abs(mode) < abs(unshrunk)
        assert np.sign(mode) == np.sign(unshrunk)


def test_predict_closed_forms():
    fit = PsModelFit("logit", "logistic", np.array([-0.2, 0.5, 0.5]))
    subject = SubjectRecord("c", 1, CompositeOutcome(1.0, 0, 1.0, 0), (1.0, 1.0))
    assert predict_ps(fit, subject) == pytest.approx(1 / (1 + math.exp(-0.8)))
    zero = PsModelFit("logit", "logistic", np.zeros(3))
    assert predict_ps(zero, subject) == 0.5
    cll = PsModelFit("cloglog", "logistic", np.zeros(3))
    assert predict_ps(cll, subject) == pytest.approx(1 - math.exp(-1))


def test_unknown_cluster():
    fit = PsModelFit("logit", "fixed_effects", np.zeros(2), cluster_effects={"a": 0.0})
    subject = SubjectRecord("b", 1, CompositeOutcome(1.0, 0, 1.0, 0), (0.0,))
    with pytest.raises(UnknownClusterError):
        predict_ps(fit, subject)
    with pytest.raises(KeyError):
        predict_ps(fit, subject)


def test_initial_weights_closed_form():
    ds = dataset([0, 0], [1, 0], np.zeros((2, 1)))
    fit = PsModelFit("logit", "logistic", np.array([0.0, 0.0]))
    w = initial_weights(fit, ds)
    assert list(w.weights) == [2.0, 2.0]
    assert w.backend is Backend.LOGISTIC
    fit = PsModelFit("logit", "logistic", np.array([math.log(0.2 / 0.8), 0.0]))
    assert initial_weights(fit, ds).weights[1] == pytest.approx(1.25)


def test_extreme_propensities_listed():
    with pytest.raises(ExtremePropensityError) as info:
        check_propensities(np.array([0.5, 1e-8, 0.3, 1 - 1e-9]))
    assert info.value.subjects == [1, 3]


def test_predict_dataset_matches_records(confounded):
    fit = fit_fixed_effects(confounded)
    ps = predict_ps_dataset(fit, confounded)
    for i in (0, 77, 999):
        assert ps[i] == pytest.approx(predict_ps(fit, confounded.record(i)), abs=1e-14)
