"""Win-ratio point estimators.

``stratified_estimate`` is the weighted stratified estimator for clustered
data. Each cluster contributes weighted within-cluster win and loss
proportions (tau1_i, tau2_i) and a weight equal to its discordant-pair weight
mass. Two ways of combining them are offered:

* ``"pooled"`` (default): sum_i w_i tau1_i / sum_i w_i tau2_i, i.e. the
  cluster ratios mu_i averaged with weights w_i tau2_i. Exactly antisymmetric
  under arm exchange and centred at zero under exchangeable arms.
* ``"mean_ratio"``: sum_i w_i mu_i / sum_i w_i. Because E[mu_i] > 1 whenever
  mu_i and 1/mu_i share a law, this version drifts upward in small clusters.

``ipw_estimate_independent`` pools all subjects and ignores clusters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import ClusterDataset, WeightSet
from .errors import DegenerateClusterError, UndefinedRatioError, ValidationError
from .propensity import PsModelFit, check_propensities, predict_ps_dataset


@dataclass(frozen=True)
class ClusterComponents:
    cluster_id: object
    tau1: float
    tau2: float
    cluster_weight: float

    @property
    def mu(self) -> float | None:
        return self.tau1 / self.tau2 if self.tau2 > 0 else None


@dataclass(frozen=True)
class EstimateResult:
    log_wr: float
    per_cluster: tuple = ()
    total_weight: float = float("nan")
    excluded_clusters: tuple = ()
    tau1: float = float("nan")
    tau2: float = float("nan")

    @property
    def wr(self) -> float:
        return math.exp(self.log_wr)


def _pair_counts(sizes):
    return sizes * (sizes - 1) / 2.0


def _weights_array(w, ds):
    arr = w.weights if isinstance(w, WeightSet) else np.asarray(w, dtype=float)
    if arr.shape != (ds.n,):
        raise ValidationError("weights do not match the dataset")
    return arr


def tau_pair(ds_cluster: ClusterDataset, w) -> tuple[float, float]:
    """(tau1, tau2) for a dataset holding a single cluster."""
    if ds_cluster.m != 1:
        raise ValidationError("tau_pair expects a single-cluster dataset")
    if ds_cluster.n < 2:
        raise DegenerateClusterError("a cluster needs at least two subjects")
    wins, losses, _, _ = _kernels.dataset_win_loss_sums(ds_cluster, _weights_array(w, ds_cluster))
    denom = 2.0 * _pair_counts(float(ds_cluster.n))
    return float(wins[0] / denom), float(losses[0] / denom)


def cluster_weight(ds_cluster: ClusterDataset, w) -> float:
    """Half the product of the arm weight totals: the weighted discordant-pair mass."""
    if ds_cluster.m != 1:
        raise ValidationError("cluster_weight expects a single-cluster dataset")
    if ds_cluster.n < 2:
        raise DegenerateClusterError("a cluster needs at least two subjects")
    arr = _weights_array(w, ds_cluster)
    z = ds_cluster.treatment == 1
    return 0.5 * float(arr[z].sum()) * float(arr[~z].sum())


def cluster_components(ds: ClusterDataset, w) -> list[ClusterComponents]:
    arr = _weights_array(w, ds)
    sizes = ds.cluster_sizes.astype(float)
    if np.any(sizes < 2):
        k = int(np.flatnonzero(sizes < 2)[0])
        raise DegenerateClusterError(f"cluster {ds.labels[k]!r} has fewer than two subjects")
    wins, losses, wt, wc = _kernels.dataset_win_loss_sums(ds, arr)
    denom = 2.0 * _pair_counts(sizes)
    return [
        ClusterComponents(ds.labels[k], float(wins[k] / denom[k]), float(losses[k] / denom[k]), 0.5 * float(wt[k] * wc[k]))
        for k in range(ds.m)
    ]


AGGREGATIONS = ("pooled", "mean_ratio")


def stratified_estimate(ds: ClusterDataset, w, aggregation: str = "pooled") -> EstimateResult:
    """Combine cluster-specific win ratios into one log win ratio.

    Under ``"mean_ratio"`` clusters with tau1 = 0 or tau2 = 0 have no defined
    ratio and are left out. Under ``"pooled"`` only clusters with no decided
    pair at all (tau1 = tau2 = 0) are left out; dropping a cluster because
    one arm never won would select on the outcome. Left-out clusters are
    listed in ``excluded_clusters``. The returned ``tau1``/``tau2`` are the
    cluster-weight averages of the retained clusters' proportions.

    Raises:
        UndefinedRatioError: every cluster is degenerate.
    """
    if aggregation not in AGGREGATIONS:
        raise ValidationError(f"unknown aggregation {aggregation!r}; expected one of {AGGREGATIONS}")
    arr = _weights_array(w, ds)
    sizes = ds.cluster_sizes.astype(float)
    if np.any(sizes < 2):
        k = int(np.flatnonzero(sizes < 2)[0])
        raise DegenerateClusterError(f"cluster {ds.labels[k]!r} has fewer than two subjects")
    wins, losses, wt, wc = _kernels.dataset_win_loss_sums(ds, arr)
    denom = 2.0 * _pair_counts(sizes)
    tau1 = wins / denom
    tau2 = losses / denom
    cw = 0.5 * wt * wc
    if aggregation == "pooled":
        keep = ((tau1 > 0) | (tau2 > 0)) & (cw > 0)
    else:
        keep = (tau1 > 0) & (tau2 > 0) & (cw > 0)
    if not keep.any():
        raise UndefinedRatioError("no cluster has a decided treated-vs-control pair")
    total = float(np.sum(cw[keep]))
    mean_tau1 = float(np.sum(cw[keep] * tau1[keep])) / total
    mean_tau2 = float(np.sum(cw[keep] * tau2[keep])) / total
    if aggregation == "pooled":
        if mean_tau1 <= 0 or mean_tau2 <= 0:
            raise UndefinedRatioError("pooled win or loss proportion is zero")
        log_wr = math.log(mean_tau1) - math.log(mean_tau2)
    else:
        mu = tau1[keep] / tau2[keep]
        log_wr = math.log(float(np.sum(cw[keep] * mu)) / total)
    per_cluster = tuple(
        ClusterComponents(ds.labels[k], float(tau1[k]), float(tau2[k]), float(cw[k])) for k in range(ds.m)
    )
    excluded = tuple(ds.labels[k] for k in np.flatnonzero(~keep))
    return EstimateResult(
        log_wr=log_wr,
        per_cluster=per_cluster,
        total_weight=total,
        excluded_clusters=excluded,
        tau1=mean_tau1,
        tau2=mean_tau2,
    )


def ipw_estimate_from_propensities(ds: ClusterDataset, ps: np.ndarray) -> EstimateResult:
    check_propensities(ps)
    z = ds.treatment
    w = np.where(z == 1, 1.0 / ps, 1.0 / (1.0 - ps))
    wins, losses, _, _ = _kernels.win_loss_sums(
        np.array([0, ds.n], dtype=np.int64),
        z,
        w,
        ds.u_nonterminal,
        ds.delta_nonterminal,
        ds.u_terminal,
        ds.delta_terminal,
    )
    denom = 2.0 * _pair_counts(float(ds.n))
    tau1, tau2 = float(wins[0] / denom), float(losses[0] / denom)
    if tau2 <= 0 or tau1 <= 0:
        raise UndefinedRatioError("pooled win or loss proportion is zero")
    return EstimateResult(log_wr=math.log(tau1 / tau2), tau1=tau1, tau2=tau2)


def ipw_estimate_independent(ds: ClusterDataset, fit: PsModelFit) -> EstimateResult:
    """Pooled inverse-probability-weighted win ratio, ignoring clusters."""
    return ipw_estimate_from_propensities(ds, predict_ps_dataset(fit, ds))
