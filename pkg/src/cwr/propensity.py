"""Propensity-score working models and initial (inverse-probability) weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from . import _kernels
from .data import Backend, ClusterDataset, SolverDiagnostics, SubjectRecord, WeightSet
from .errors import (
    ConvergenceError,
    ExtremePropensityError,
    SeparationError,
    SingularDesignError,
    UnknownClusterError,
    ValidationError,
)

logger = logging.getLogger(__name__)

LINKS = ("logit", "cloglog")
SCORE_TOL = 1e-8
MAX_IRLS_ITER = 100
SEPARATION_EPS = 1e-10
PROPENSITY_EPS = 1e-6


@dataclass(frozen=True)
class PsModelFit:
    """A fitted treatment-selection model.

    ``coefficients`` holds the intercept followed by one slope per covariate.
    Cluster-aware fits add ``cluster_effects``: for ``fixed_effects`` the
    offset of each cluster relative to the first (reference) cluster, for
    ``random_effects`` the posterior mode of each random intercept.
    """

    link: str
    kind: str
    coefficients: np.ndarray
    cluster_effects: Mapping = field(default_factory=dict)
    re_variance: float | None = None
    converged: bool = True
    iterations: int = 0
    max_gradient: float = 0.0
    degenerate_variance: bool = False

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    @property
    def cluster_aware(self) -> bool:
        return self.kind in ("fixed_effects", "random_effects")


def _check_link(link):
    if link not in LINKS:
        raise ValidationError(f"unknown link {link!r}; expected one of {LINKS}")


def inverse_link(eta, link):
    eta = np.asarray(eta, dtype=float)
    if link == "logit":
        return expit(eta)
    return -np.expm1(-np.exp(eta))


def _mean_and_derivative(eta, link):
    if link == "logit":
        p = expit(eta)
        return p, p * (1.0 - p)
    u = np.exp(np.minimum(eta, 700.0))
    p = -np.expm1(-u)
    return p, u * np.exp(-u)


def _loglik(y, p):
    with np.errstate(divide="ignore"):
        return float(np.sum(np.where(y == 1, np.log(p), np.log1p(-p))))


def _check_rank(D):
    if D.shape[0] < D.shape[1] or np.linalg.matrix_rank(D) < D.shape[1]:
        raise SingularDesignError(
            f"design matrix ({D.shape[0]}x{D.shape[1]}) is not of full column rank"
        )


def _irls(D, y, link):
    """Maximum likelihood for a binary GLM by Fisher scoring with step-halving.

    Returns (beta, fitted probabilities, iterations, max |score|, converged).
    """
    ybar = min(max(y.mean(), 1e-3), 1 - 1e-3)
    beta = np.zeros(D.shape[1])
    beta[0] = np.log(ybar / (1 - ybar)) if link == "logit" else np.log(-np.log1p(-ybar))
    eta = D @ beta
    p, dp = _mean_and_derivative(eta, link)
    ll = _loglik(y, p)
    max_score = np.inf
    it = 0
    for it in range(1, MAX_IRLS_ITER + 1):
        var = np.clip(p * (1 - p), 1e-300, None)
        score = D.T @ ((y - p) * dp / var)
        max_score = float(np.max(np.abs(score)))
        if max_score < SCORE_TOL:
            return beta, p, it - 1, max_score, True
        W = dp * dp / var
        info = D.T @ (D * W[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularDesignError("information matrix is singular") from None
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = D @ cand
            p_c, dp_c = _mean_and_derivative(eta_c, link)
            ll_c = _loglik(y, p_c)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, p, dp, ll = cand, p_c, dp_c, ll_c
    var = np.clip(p * (1 - p), 1e-300, None)
    max_score = float(np.max(np.abs(D.T @ ((y - p) * dp / var))))
    return beta, p, it, max_score, max_score < SCORE_TOL


def _separated(p):
    return (p < SEPARATION_EPS) | (p > 1 - SEPARATION_EPS)


def fit_logistic(ds: ClusterDataset, link: str = "logit") -> PsModelFit:
    """Binary regression of treatment on an intercept and the covariates."""
    _check_link(link)
    D = np.column_stack([np.ones(ds.n), ds.covariates])
    _check_rank(D)
    y = ds.treatment.astype(float)
    beta, p, it, score, ok = _irls(D, y, link)
    if np.any(_separated(p)):
        raise SeparationError("fitted propensities hit 0 or 1 (separation)")
    return PsModelFit(link, "logistic", beta, converged=ok, iterations=it, max_gradient=score)


def fit_fixed_effects(ds: ClusterDataset, link: str = "logit") -> PsModelFit:
    """As :func:`fit_logistic` with one indicator column per non-reference cluster."""
    _check_link(link)
    treated, control = ds.arm_counts()
    pure = np.flatnonzero((treated == 0) | (control == 0))
    if pure.size:
        label = ds.labels[int(pure[0])]
        raise SeparationError(f"cluster {label!r} has a single arm; its offset is unbounded", cluster=label)
    dummies = np.zeros((ds.n, ds.m - 1))
    if ds.m > 1:
        rows = np.flatnonzero(ds.codes > 0)
        dummies[rows, ds.codes[rows] - 1] = 1.0
    D = np.column_stack([np.ones(ds.n), ds.covariates, dummies])
    _check_rank(D)
    y = ds.treatment.astype(float)
    beta, p, it, score, ok = _irls(D, y, link)
    sep = _separated(p)
    if np.any(sep):
        k = int(ds.codes[np.flatnonzero(sep)[0]])
        raise SeparationError(f"separation in cluster {ds.labels[k]!r}", cluster=ds.labels[k])
    k = 1 + ds.p
    offsets = np.concatenate(([0.0], beta[k:]))
    return PsModelFit(
        link,
        "fixed_effects",
        beta[:k],
        cluster_effects=dict(zip(ds.labels, offsets.tolist())),
        converged=ok,
        iterations=it,
        max_gradient=score,
    )


# -- random intercept -------------------------------------------------------------
RE_INNER_TOL = 1e-8
RE_OUTER_TOL = 1e-6
RE_MAX_OUTER = 200
RE_DEGENERATE_VAR = 1e-8


class _LaplaceObjective:
    def __init__(self, ds, link):
        self.D = np.column_stack([np.ones(ds.n), ds.covariates])
        self.y = ds.treatment.astype(np.int64)
        self.offsets = np.asarray(ds.offsets, dtype=np.int64)
        self.link = _kernels.LOGIT if link == "logit" else _kernels.CLOGLOG
        self.m = ds.m

    def __call__(self, theta, b0):
        b = b0.copy()
        eta = self.D @ theta[:-1]
        val = _kernels.laplace_loglik(eta, self.y, self.offsets, float(theta[-1]), b, self.link, RE_INNER_TOL * 1e-2)
        return val, b


def _fd_derivatives(f, theta, b0, f0):
    k = theta.size
    h = 1e-4 * np.maximum(1.0, np.abs(theta))
    fp = np.empty(k)
    fm = np.empty(k)
    for i in range(k):
        e = np.zeros(k)
        e[i] = h[i]
        fp[i] = f(theta + e, b0)[0]
        fm[i] = f(theta - e, b0)[0]
    grad = (fp - fm) / (2 * h)
    H = np.empty((k, k))
    for i in range(k):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h[i] ** 2
        for j in range(i + 1, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            v = (
                f(theta + ei + ej, b0)[0]
                - f(theta + ei - ej, b0)[0]
                - f(theta - ei + ej, b0)[0]
                + f(theta - ei - ej, b0)[0]
            ) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return grad, H


def fit_random_intercept(ds: ClusterDataset, link: str = "logit") -> PsModelFit:
    """Binary regression with a normal random intercept per cluster.

    Maximises the Laplace approximation to the marginal likelihood over the
    fixed coefficients and the random-intercept SD by damped Newton with
    finite-difference derivatives. Cluster modes are found by Newton inside
    each evaluation. A variance estimate that collapses to zero is reported
    as 0 with ``degenerate_variance`` set.
    """
    _check_link(link)
    if ds.m < 2:
        raise ValidationError("random-intercept model needs at least two clusters")
    start = fit_logistic(ds, link)
    f = _LaplaceObjective(ds, link)
    theta = np.concatenate([start.coefficients, [1.0]])
    b = np.zeros(ds.m)
    val, b = f(theta, b)
    mu = 0.0
    for it in range(1, RE_MAX_OUTER + 1):
        grad, H = _fd_derivatives(f, theta, b, val)
        step = None
        accepted = False
        for _ in range(40):
            A = -H + mu * np.eye(theta.size)
            try:
                np.linalg.cholesky(A)
                step = np.linalg.solve(A, grad)
            except np.linalg.LinAlgError:
                mu = max(2.0 * mu, 1e-4 * max(1.0, np.max(np.abs(np.diag(H)))))
                continue
            cand_val, cand_b = f(theta + step, b)
            if cand_val >= val - 1e-10 * abs(val):
                accepted = True
                break
            mu = max(2.0 * mu, 1e-4 * max(1.0, np.max(np.abs(np.diag(H)))))
        if not accepted:
            break
        theta = theta + step
        val, b = cand_val, cand_b
        mu = mu / 4.0 if mu > 1e-12 else 0.0
        if np.max(np.abs(step)) < RE_OUTER_TOL:
            break
    else:
        raise ConvergenceError(
            "random-intercept fit did not converge", residual=float(np.max(np.abs(step))), iterations=it
        )
    sigma2 = float(theta[-1] ** 2)
    degenerate = sigma2 < RE_DEGENERATE_VAR
    if degenerate:
        logger.warning("random-intercept variance collapsed to zero")
        sigma2 = 0.0
        b = np.zeros(ds.m)
    p = inverse_link(f.D @ theta[:-1] + b[ds.codes], link)
    if np.any(_separated(p)):
        k = int(ds.codes[np.flatnonzero(_separated(p))[0]])
        raise SeparationError(f"separation in cluster {ds.labels[k]!r}", cluster=ds.labels[k])
    return PsModelFit(
        link,
        "random_effects",
        theta[:-1].copy(),
        cluster_effects=dict(zip(ds.labels, b.tolist())),
        re_variance=sigma2,
        converged=True,
        iterations=it,
        max_gradient=float(np.max(np.abs(grad))),
        degenerate_variance=degenerate,
    )


# -- prediction and weights ------------------------------------------------------
def _linear_predictor(fit: PsModelFit, X, cluster_labels):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != fit.slopes.size:
        raise ValidationError(f"expected {fit.slopes.size} covariates, got {X.shape[1]}")
    eta = fit.intercept + X @ fit.slopes
    if fit.cluster_aware:
        try:
            eta = eta + np.array([fit.cluster_effects[c] for c in cluster_labels])
        except KeyError as exc:
            raise UnknownClusterError(f"cluster {exc.args[0]!r} was not in the fitted data") from None
    return eta


def predict_ps(fit: PsModelFit, subject: SubjectRecord) -> float:
    """Fitted probability of treatment for one subject."""
    eta = _linear_predictor(fit, [subject.covariates], [subject.cluster_id])
    return float(inverse_link(eta, fit.link)[0])


def predict_ps_dataset(fit: PsModelFit, ds: ClusterDataset) -> np.ndarray:
    labels = [ds.labels[k] for k in range(ds.m)]
    if fit.cluster_aware:
        missing = [c for c in labels if c not in fit.cluster_effects]
        if missing:
            raise UnknownClusterError(f"cluster {missing[0]!r} was not in the fitted data")
        effects = np.array([fit.cluster_effects[c] for c in labels])
        eta = fit.intercept + ds.covariates @ fit.slopes + effects[ds.codes]
    else:
        eta = fit.intercept + ds.covariates @ fit.slopes
    return inverse_link(eta, fit.link)


_BACKEND_OF_KIND = {
    "logistic": Backend.LOGISTIC,
    "fixed_effects": Backend.FIXED_EFFECTS,
    "random_effects": Backend.RANDOM_EFFECTS,
}


def check_propensities(ps: np.ndarray, eps: float = PROPENSITY_EPS):
    bad = np.flatnonzero((ps <= eps) | (ps >= 1 - eps))
    if bad.size:
        raise ExtremePropensityError(
            f"{bad.size} subject(s) with propensity outside ({eps}, {1 - eps}): indices {bad[:10].tolist()}",
            subjects=bad.tolist(),
        )


def initial_weights(fit: PsModelFit, ds: ClusterDataset) -> WeightSet:
    """Inverse probability of the received treatment, per subject."""
    ps = predict_ps_dataset(fit, ds)
    check_propensities(ps)
    z = ds.treatment
    d = np.where(z == 1, 1.0 / ps, 1.0 / (1.0 - ps))
    return WeightSet(
        d,
        _BACKEND_OF_KIND[fit.kind],
        SolverDiagnostics(fit.iterations, fit.max_gradient, fit.converged),
    )
