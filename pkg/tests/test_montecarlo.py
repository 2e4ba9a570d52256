import math

import numpy as np
import pytest

from cwr.errors import ValidationError
from cwr.montecarlo import METRIC_COLUMNS, normality_screen, replicate_seeds, run_monte_carlo
from cwr.simulation import ScenarioConfig

SMALL = ScenarioConfig(m=8, n_i=16, gamma1_shape=4.0, name="small")


@pytest.fixture(scope="module")
def tiny():
    return run_monte_carlo(SMALL, ["logistic", "calibration", "unadjusted"], reps=4, B=4, seed=3)


def test_table_shape(tiny):
    assert [r.estimator for r in tiny.rows] == ["logistic", "calibration", "unadjusted"]
    lines = tiny.to_csv().strip().splitlines()
    assert lines[0].split(",") == list(METRIC_COLUMNS)
    assert len(lines) == 4
    for r in tiny.rows:
        assert r.reps == 4 and r.true_log_wr == 0.0
        assert r.bias == pytest.approx(r.mean_log_wr)
        assert 0 <= r.coverage <= 1 and 0 <= r.rejection_rate <= 1


def test_metrics_match_traces(tiny):
    tr = tiny.traces["calibration"]
    row = tiny.row("calibration")
    good = tr.log_wr[tr.ok]
    assert row.mean_log_wr == pytest.approx(good.mean())
    assert row.empirical_se == pytest.approx(good.std(ddof=1))
    s = tr.se[tr.ok]
    assert row.estimated_se == pytest.approx(s.mean())
    assert row.coverage == pytest.approx(np.mean(np.abs(good) <= 1.959963984540054 * s))


def test_markdown_and_traces(tiny):
    md = tiny.to_markdown()
    assert md.count("\n") == 2 + len(tiny.rows)
    traces = tiny.traces_csv().strip().splitlines()
    assert traces[0].startswith("rep,logistic_log_wr,logistic_se")
    assert len(traces) == 5


def test_deterministic(tiny):
    again = run_monte_carlo(SMALL, ["logistic", "calibration", "unadjusted"], reps=4, B=4, seed=3)
    assert again.to_csv() == tiny.to_csv()
    assert again.traces_csv() == tiny.traces_csv()


def test_parallel_matches_serial(tiny):
    par = run_monte_carlo(SMALL, ["logistic", "calibration", "unadjusted"], reps=4, B=4, seed=3, n_jobs=2)
    assert par.to_csv() == tiny.to_csv()


def test_estimators_share_datasets():
    # the same estimator listed under two links sees identical data
    res = run_monte_carlo(SMALL, ["logistic", "calibration"], reps=3, B=0, seed=1)
    other = run_monte_carlo(SMALL, ["calibration"], reps=3, B=0, seed=1)
    np.testing.assert_array_equal(res.traces["calibration"].log_wr, other.traces["calibration"].log_wr)


def test_no_bootstrap_gives_nan_se_metrics():
    res = run_monte_carlo(SMALL, ["logistic", "fixed"], reps=3, B=3, seed=0, no_bootstrap=["fixed"])
    assert math.isnan(res.row("fixed").coverage)
    assert math.isnan(res.row("fixed").estimated_se)
    assert not math.isnan(res.row("logistic").estimated_se)
    assert "NA" in res.to_markdown()


def test_failures_flagged():
    # two subjects per cluster: a single-arm cluster is common and the fixed-effects fit separates
    cfg = ScenarioConfig(m=3, n_i=2, gamma1_shape=4.0)
    res = run_monte_carlo(cfg, ["fixed"], reps=6, B=0, seed=0)
    row = res.row("fixed")
    assert row.failures > 3 and row.flagged
    assert res.any_flagged


def test_replicate_seeds_are_independent_of_estimators():
    a_rng, a_seed = replicate_seeds(5, 2)
    b_rng, b_seed = replicate_seeds(5, 2)
    assert a_seed == b_seed
    assert a_rng.random() == b_rng.random()
    assert replicate_seeds(5, 3)[1] != a_seed


@pytest.mark.parametrize("kwargs", [{"reps": 1}, {"B": 1}, {"B": -2}])
def test_arguments_validated(kwargs):
    with pytest.raises(ValidationError):
        run_monte_carlo(SMALL, ["logistic"], **{"reps": 3, "B": 0, **kwargs})


def test_unknown_estimator():
    with pytest.raises(ValidationError):
        run_monte_carlo(SMALL, ["magic"], reps=2, B=0)


def test_normality_screen():
    v = np.random.default_rng(0).normal(size=20_000)
    skew, kurt = normality_screen(v)
    assert abs(skew) < 0.05 and abs(kurt) < 0.1
    skew, _ = normality_screen(np.random.default_rng(0).exponential(size=20_000))
    assert skew == pytest.approx(2.0, abs=0.2)
