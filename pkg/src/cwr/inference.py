"""Bootstrap standard errors, Wald tests and covariate balance diagnostics."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClusterDataset, WeightSet
from .errors import CwrError, DegenerateDataError, DomainError, UnstableBootstrapError, ValidationError
from .pipeline import Pipeline

Z_975 = 1.959963984540054


@dataclass(frozen=True)
class InferenceResult:
    log_wr: float
    se_log_wr: float
    ci_low: float
    ci_high: float
    z_stat: float
    p_value: float
    bootstrap_reps_used: int
    failed_reps: int
    replicates: np.ndarray = field(repr=False, compare=False, default=None)


def wald_test(log_wr: float, se: float, null_value: float = 0.0) -> tuple[float, float]:
    """Two-sided test against a standard normal reference."""
    if not se > 0:
        raise DomainError(f"standard error must be positive, got {se}")
    z = (log_wr - null_value) / se
    return z, math.erfc(abs(z) / math.sqrt(2.0))


def sample_sd(values) -> float:
    values = [float(v) for v in values]
    k = len(values)
    mean = math.fsum(values) / k
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (k - 1))


def _replicate_cluster(ds, pipeline, seed, b):
    rng = np.random.default_rng([seed, b])
    idx = rng.integers(0, ds.m, size=ds.m)
    return pipeline.estimate(ds.take_clusters(idx)).log_wr


def _replicate_subject(ds, pipeline, seed, b):
    rng = np.random.default_rng([seed, b])
    idx = rng.integers(0, ds.n, size=ds.n)
    return pipeline.estimate(ds.take_subjects(idx)).log_wr


def _run_chunk(fn, ds, pipeline, seed, indices):
    out = []
    for b in indices:
        try:
            out.append(fn(ds, pipeline, seed, b))
        except (CwrError, np.linalg.LinAlgError, FloatingPointError):
            out.append(None)
    return out


def _bootstrap(fn, ds, pipeline, B, seed, point, n_jobs):
    if B < 2:
        raise ValidationError("bootstrap needs B >= 2")
    if seed < 0:
        raise ValidationError("seed must be nonnegative")
    if point is None:
        point = pipeline.estimate(ds).log_wr
    indices = list(range(B))
    if n_jobs and n_jobs > 1:
        chunks = [indices[i::n_jobs] for i in range(n_jobs)]
        results = [None] * B
        with ProcessPoolExecutor(n_jobs) as pool:
            futures = [pool.submit(_run_chunk, fn, ds, pipeline, seed, c) for c in chunks]
            for c, fut in zip(chunks, futures):
                for b, v in zip(c, fut.result()):
                    results[b] = v
    else:
        results = _run_chunk(fn, ds, pipeline, seed, indices)
    good = [v for v in results if v is not None]
    failed = B - len(good)
    if len(good) < max(2, 0.5 * B):
        raise UnstableBootstrapError(
            f"only {len(good)} of {B} bootstrap replicates succeeded", iterations=B
        )
    se = sample_sd(good)
    # replicates that agree up to rounding carry no sampling variability
    if se <= 1e-12 * max(1.0, abs(point)):
        se = 0.0
    if se > 0:
        z, p = wald_test(point, se)
    else:
        z, p = float("nan"), float("nan")
    return InferenceResult(
        log_wr=point,
        se_log_wr=se,
        ci_low=point - Z_975 * se,
        ci_high=point + Z_975 * se,
        z_stat=z,
        p_value=p,
        bootstrap_reps_used=len(good),
        failed_reps=failed,
        replicates=np.array(good),
    )


def cluster_bootstrap(
    ds: ClusterDataset, pipeline: Pipeline, B: int, seed: int, point: float | None = None, n_jobs: int = 1
) -> InferenceResult:
    """Resample whole clusters with replacement and rerun the full pipeline.

    Replicate ``b`` draws from ``default_rng([seed, b])``, so the result does
    not depend on ``n_jobs``. Replicates whose pipeline raises are counted in
    ``failed_reps`` and skipped.

    Raises:
        UnstableBootstrapError: fewer than max(2, B/2) replicates succeeded.
    """
    return _bootstrap(_replicate_cluster, ds, pipeline, B, seed, point, n_jobs)


def subject_bootstrap(
    ds: ClusterDataset, pipeline: Pipeline, B: int, seed: int, point: float | None = None, n_jobs: int = 1
) -> InferenceResult:
    """Resample subjects with replacement, ignoring clusters."""
    return _bootstrap(_replicate_subject, ds, pipeline, B, seed, point, n_jobs)


def bootstrap(ds, pipeline: Pipeline, B: int, seed: int, point=None, n_jobs: int = 1) -> InferenceResult:
    """Cluster bootstrap for stratified estimators, subject bootstrap otherwise."""
    fn = cluster_bootstrap if pipeline.clustered else subject_bootstrap
    return fn(ds, pipeline, B, seed, point=point, n_jobs=n_jobs)


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    weighted_abs_diff: float
    unweighted_abs_diff: float


def balance_diagnostics(ds: ClusterDataset, w) -> list[BalanceRow]:
    """Absolute difference of (weighted) covariate means between arms."""
    arr = w.weights if isinstance(w, WeightSet) else np.asarray(w, dtype=float)
    if arr.shape != (ds.n,):
        raise ValidationError("weights do not match the dataset")
    z = ds.treatment == 1
    wt, wc = arr[z].sum(), arr[~z].sum()
    if not (wt > 0 and wc > 0):
        raise DegenerateDataError("an arm has zero total weight")
    X = ds.covariates
    weighted = np.abs(arr[z] @ X[z] / wt - arr[~z] @ X[~z] / wc)
    unweighted = np.abs(X[z].mean(axis=0) - X[~z].mean(axis=0))
    return [
        BalanceRow(f"x{k + 1}", float(weighted[k]), float(unweighted[k])) for k in range(ds.p)
    ]
