import math
from dataclasses import dataclass

import numpy as np
import pytest

from cwr.data import Backend, ClusterDataset, WeightSet
from cwr.errors import DegenerateDataError, DomainError, UndefinedRatioError, UnstableBootstrapError, ValidationError
from cwr.inference import Z_975, balance_diagnostics, bootstrap, cluster_bootstrap, sample_sd, subject_bootstrap, wald_test
from cwr.pipeline import Pipeline

from conftest import make_dataset


@pytest.mark.parametrize(
    "log_wr, se, z, p",
    [
        (0.0, 0.3, 0.0, 1.0),
        (Z_975 * 0.1, 0.1, Z_975, 0.05),
        (-0.158, 0.125, -1.264, 0.2062),
    ],
)
def test_wald_examples(log_wr, se, z, p):
    got_z, got_p = wald_test(log_wr, se)
    assert got_z == pytest.approx(z, abs=1e-3)
    assert got_p == pytest.approx(p, abs=1e-4)


def test_wald_rejects_zero_se():
    with pytest.raises(DomainError):
        wald_test(0.1, 0.0)


def test_sample_sd_matches_numpy(rng):
    v = rng.normal(size=57)
    assert sample_sd(v) == pytest.approx(np.std(v, ddof=1), rel=1e-13)


@pytest.fixture(scope="module")
def small():
    return make_dataset(np.random.default_rng(77), [12] * 8, confounding=0.5)


def test_seed_determinism(small):
    pipe = Pipeline("calibration")
    a = cluster_bootstrap(small, pipe, 30, seed=5)
    b = cluster_bootstrap(small, pipe, 30, seed=5)
    c = cluster_bootstrap(small, pipe, 30, seed=6)
    assert a.se_log_wr == b.se_log_wr
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert a.se_log_wr != c.se_log_wr


def test_worker_count_does_not_change_result(small):
    pipe = Pipeline("logistic")
    a = cluster_bootstrap(small, pipe, 12, seed=3, n_jobs=1)
    b = cluster_bootstrap(small, pipe, 12, seed=3, n_jobs=2)
    assert a.se_log_wr == b.se_log_wr


def test_interval_and_test_fields(small):
    res = bootstrap(small, Pipeline("fixed"), 25, seed=1)
    assert res.ci_low == pytest.approx(res.log_wr - Z_975 * res.se_log_wr)
    assert res.ci_high == pytest.approx(res.log_wr + Z_975 * res.se_log_wr)
    z, p = wald_test(res.log_wr, res.se_log_wr)
    assert (res.z_stat, res.p_value) == (z, p)
    assert res.bootstrap_reps_used + res.failed_reps == 25


def test_identical_clusters_give_zero_se():
    one = make_dataset(np.random.default_rng(4), [10], confounding=0.0)
    k = 6
    ds = ClusterDataset(
        np.repeat(np.arange(k), one.n),
        np.tile(one.treatment, k),
        np.tile(one.u_nonterminal, k),
        np.tile(one.delta_nonterminal, k),
        np.tile(one.u_terminal, k),
        np.tile(one.delta_terminal, k),
        np.tile(one.covariates, (k, 1)),
    )
    res = cluster_bootstrap(ds, Pipeline("logistic"), 20, seed=0)
    assert res.se_log_wr == 0.0
    assert math.isnan(res.z_stat) and math.isnan(res.p_value)


def test_unadjusted_uses_subject_resampling(small):
    pipe = Pipeline("unadjusted")
    a = bootstrap(small, pipe, 10, seed=2)
    b = subject_bootstrap(small, pipe, 10, seed=2)
    np.testing.assert_array_equal(a.replicates, b.replicates)


@dataclass(frozen=True)
class AlwaysFails:
    clustered: bool = True

    def estimate(self, ds):
        raise UndefinedRatioError("no decided pair")


def test_unstable_bootstrap(small):
    with pytest.raises(UnstableBootstrapError):
        cluster_bootstrap(small, AlwaysFails(), 10, seed=0, point=0.1)


@pytest.mark.parametrize("B, seed", [(1, 0), (0, 0), (10, -1)])
def test_bootstrap_arguments_validated(small, B, seed):
    with pytest.raises(ValidationError):
        cluster_bootstrap(small, Pipeline("logistic"), B, seed)


def test_balance_closed_form():
    t = np.arange(1.0, 5)
    ds = ClusterDataset([0] * 4, [1, 1, 0, 0], t, [0] * 4, t, [0] * 4, np.array([[1.0], [3.0], [2.0], [6.0]]))
    rows = balance_diagnostics(ds, WeightSet(np.array([1.0, 3.0, 1.0, 1.0]), Backend.LOGISTIC))
    assert rows[0].covariate == "x1"
    assert rows[0].unweighted_abs_diff == pytest.approx(2.0)
    assert rows[0].weighted_abs_diff == pytest.approx(abs(10 / 4 - 4.0))


def test_calibrated_weights_balance_exactly(confounded):
    w = Pipeline("calibration").weights(confounded)
    for row in balance_diagnostics(confounded, w):
        assert row.weighted_abs_diff < 1e-9
        assert row.unweighted_abs_diff > 0.05


def test_balance_zero_weight_arm():
    t = np.arange(1.0, 3)
    ds = ClusterDataset([0, 0], [1, 0], t, [0, 0], t, [0, 0], np.zeros((2, 1)))
    with pytest.raises(DegenerateDataError):
        balance_diagnostics(ds, np.array([1.0, 0.0]))
