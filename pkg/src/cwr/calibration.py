"""Calibrated weights by exponential tilting of initial weights.

The final weight of subject j in cluster i is

    w_ij = n_i d_ij exp(-lam_a' x_ij) / sum_{j' in arm a of i} d_ij' exp(-lam_a' x_ij')

with a separate multiplier vector per arm (``lambda1`` for treated, ``lambda2``
for controls). The per-cluster normalisation makes each arm's weights sum to
the cluster size, and the multipliers are chosen so that, in each arm, the
weighted covariate totals equal the unweighted totals over the whole sample.
This is the minimiser of sum w log(w/d) under those constraints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Backend, ClusterDataset, SolverDiagnostics, WeightSet
from .errors import (
    ConvergenceError,
    DegenerateDataError,
    DomainError,
    SingularJacobianError,
    ValidationError,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 30


@dataclass(frozen=True)
class CalibrationSolution:
    weights: WeightSet
    lambda1: np.ndarray
    lambda2: np.ndarray
    constraint_residual: float
    iterations: int


@dataclass(frozen=True)
class BalanceResiduals:
    """Achieved minus target for every calibration constraint."""

    treated_covariates: np.ndarray  # (p,)
    control_covariates: np.ndarray  # (p,)
    treated_clusters: np.ndarray  # (m,)
    control_clusters: np.ndarray  # (m,)

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.treated_covariates, self.control_covariates, self.treated_clusters, self.control_clusters]
        )

    @property
    def max_abs(self) -> float:
        v = self.as_vector()
        return float(np.max(np.abs(v))) if v.size else 0.0


def _as_array(w):
    return w.weights if isinstance(w, WeightSet) else np.asarray(w, dtype=float)


def evaluate_balance_constraints(w, ds: ClusterDataset) -> BalanceResiduals:
    w = _as_array(w)
    if w.shape != (ds.n,):
        raise ValidationError("weights do not match the dataset")
    z = ds.treatment == 1
    target = ds.covariates.sum(axis=0)
    sizes = ds.cluster_sizes.astype(float)
    return BalanceResiduals(
        treated_covariates=(w * z) @ ds.covariates - target,
        control_covariates=(w * ~z) @ ds.covariates - target,
        treated_clusters=np.bincount(ds.codes, weights=w * z, minlength=ds.m) - sizes,
        control_clusters=np.bincount(ds.codes, weights=w * ~z, minlength=ds.m) - sizes,
    )


def kl_objective(w, d) -> float:
    """Sum of w log(w / d)."""
    w, d = _as_array(w), _as_array(d)
    if w.shape != d.shape:
        raise ValidationError("weight vectors differ in length")
    if np.any(w <= 0) or np.any(d <= 0):
        raise DomainError("KL objective needs strictly positive weights")
    return float(np.sum(w * np.log(w / d)))


class _ArmProblem:
    """Tilting multipliers for one arm, on standardised covariates."""

    def __init__(self, logd, Xs, codes, sizes, target):
        self.logd = logd
        self.Xs = Xs
        self.codes = codes
        self.m = sizes.size
        self.n_sub = sizes[codes]
        self.target = target

    def weights(self, lam):
        e = self.logd - self.Xs @ lam
        # shift per cluster so no cluster underflows to an all-zero row
        top = np.full(self.m, -np.inf)
        np.maximum.at(top, self.codes, e)
        u = np.exp(e - top[self.codes])
        s = np.bincount(self.codes, weights=u, minlength=self.m)
        return self.n_sub * u / s[self.codes]

    def residual(self, w):
        return self.Xs.T @ w - self.target

    def jacobian(self, w):
        p = w / self.n_sub
        xbar = np.stack(
            [np.bincount(self.codes, weights=p * col, minlength=self.m) for col in self.Xs.T], axis=1
        )
        centred = self.Xs - xbar[self.codes]
        return -(self.Xs * w[:, None]).T @ centred

    def solve(self, tol, max_iter):
        k = self.Xs.shape[1]
        lam = np.zeros(k)
        w = self.weights(lam)
        r = self.residual(w)
        if k == 0:
            return lam, w, 0.0, 0
        polished = False
        for it in range(1, max_iter + 1):
            res = float(np.max(np.abs(r)))
            if res <= tol:
                if polished:
                    return lam, w, res, it - 1
                polished = True
            J = self.jacobian(w)
            try:
                if np.linalg.cond(J) > 1e12:
                    raise np.linalg.LinAlgError
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                raise SingularJacobianError(
                    "calibration Jacobian is singular (covariates collinear within an arm)"
                ) from None
            norm = np.linalg.norm(r)
            t = 1.0
            for _ in range(MAX_HALVINGS + 1):
                lam_c = lam + t * step
                w_c = self.weights(lam_c)
                r_c = self.residual(w_c)
                if np.all(np.isfinite(w_c)) and np.linalg.norm(r_c) < norm:
                    break
                t *= 0.5
            else:
                if polished:
                    return lam, w, res, it - 1
                raise ConvergenceError(
                    "calibration step-halving failed", residual=res, iterations=it
                )
            lam, w, r = lam_c, w_c, r_c
        res = float(np.max(np.abs(r)))
        if res <= tol:
            return lam, w, res, max_iter
        raise ConvergenceError(
            f"calibration did not converge in {max_iter} iterations (residual {res:.3g})",
            residual=res,
            iterations=max_iter,
        )


def solve_calibration(
    d: WeightSet,
    ds: ClusterDataset,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> CalibrationSolution:
    """Map initial weights ``d`` to calibrated weights.

    Solves the treated and control multipliers as two independent Newton
    problems (damped by step-halving, starting from zero) on covariates
    standardised by the overall mean and SD. ``tol`` bounds the largest
    absolute standardised balance residual; the solver takes one further
    Newton step after reaching it.

    Raises:
        ConvergenceError: ``max_iter`` reached, or no step-halving improved the
            residual.
        SingularJacobianError: covariates are collinear within an arm.
        DegenerateDataError: some cluster lacks one of the arms.
    """
    dw = _as_array(d)
    if dw.shape != (ds.n,):
        raise ValidationError("initial weights do not match the dataset")
    treated, control = ds.arm_counts()
    if np.any(treated == 0) or np.any(control == 0):
        raise DegenerateDataError("calibration needs both arms in every cluster")
    X = ds.covariates
    sd = X.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(X.mean(axis=0)))
    mean = X.mean(axis=0)
    Xs = (X[:, keep] - mean[keep]) / sd[keep]
    target = Xs.sum(axis=0)
    sizes = ds.cluster_sizes.astype(float)
    logd = np.log(dw)

    lambdas, w, total_it, worst = [], np.empty(ds.n), 0, 0.0
    for arm in (1, 0):
        idx = ds.treatment == arm
        prob = _ArmProblem(logd[idx], Xs[idx], ds.codes[idx], sizes, target)
        lam_s, w_arm, res, it = prob.solve(tol, max_iter)
        w[idx] = w_arm
        lam = np.zeros(ds.p)
        lam[keep] = lam_s / sd[keep]
        lambdas.append(lam)
        total_it += it
        worst = max(worst, res)
    resid = evaluate_balance_constraints(w, ds)
    cov_res = np.concatenate([resid.treated_covariates, resid.control_covariates])
    constraint_residual = float(np.max(np.abs(cov_res))) if cov_res.size else 0.0
    ws = WeightSet(w, Backend.CALIBRATION, SolverDiagnostics(total_it, worst, True))
    return CalibrationSolution(ws, lambdas[0], lambdas[1], constraint_residual, total_it)
