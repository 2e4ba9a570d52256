"""Estimator configurations: weighting back-end plus point estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_calibration
from .data import Backend, ClusterDataset, WeightSet
from .errors import ValidationError
from .estimator import AGGREGATIONS, EstimateResult, ipw_estimate_from_propensities, stratified_estimate
from .propensity import (
    LINKS,
    fit_fixed_effects,
    fit_logistic,
    fit_random_intercept,
    initial_weights,
    predict_ps_dataset,
    check_propensities,
)

ESTIMATORS = ("unadjusted", "logistic", "fixed", "random", "calibration")

_PS_FITTERS = {
    "unadjusted": fit_logistic,
    "logistic": fit_logistic,
    "fixed": fit_fixed_effects,
    "random": fit_random_intercept,
    "calibration": fit_logistic,
}


@dataclass(frozen=True)
class Pipeline:
    """Everything needed to turn a dataset into a log win ratio.

    ``unadjusted`` pools subjects (IPW from a logistic fit, clusters ignored);
    the other estimators are stratified by cluster and differ only in how the
    subject weights are produced.
    """

    estimator: str = "calibration"
    link: str = "logit"
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    aggregation: str = "pooled"

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}")
        if self.estimator not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.link not in LINKS:
            raise ValidationError(f"unknown link {self.link!r}; expected one of {LINKS}")

    @property
    def name(self) -> str:
        return self.estimator if self.link == "logit" else f"{self.estimator}-{self.link}"

    @property
    def clustered(self) -> bool:
        return self.estimator != "unadjusted"

    def weights(self, ds: ClusterDataset) -> WeightSet:
        fit = _PS_FITTERS[self.estimator](ds, self.link)
        if self.estimator == "unadjusted":
            ps = predict_ps_dataset(fit, ds)
            check_propensities(ps)
            d = np.where(ds.treatment == 1, 1.0 / ps, 1.0 / (1.0 - ps))
            return WeightSet(d, Backend.UNADJUSTED)
        d = initial_weights(fit, ds)
        if self.estimator == "calibration":
            return solve_calibration(d, ds, self.tol, self.max_iter).weights
        return d

    def run(self, ds: ClusterDataset) -> tuple[EstimateResult, WeightSet]:
        if self.estimator == "unadjusted":
            fit = fit_logistic(ds, self.link)
            ps = predict_ps_dataset(fit, ds)
            check_propensities(ps)
            d = np.where(ds.treatment == 1, 1.0 / ps, 1.0 / (1.0 - ps))
            return ipw_estimate_from_propensities(ds, ps), WeightSet(d, Backend.UNADJUSTED)
        w = self.weights(ds)
        return stratified_estimate(ds, w, self.aggregation), w

    def estimate(self, ds: ClusterDataset) -> EstimateResult:
        return self.run(ds)[0]


def pipeline_from_name(name: str) -> Pipeline:
    """Parse names such as ``calibration`` or ``calibration-cloglog``."""
    estimator, _, link = name.partition("-")
    return Pipeline(estimator, link or "logit")
