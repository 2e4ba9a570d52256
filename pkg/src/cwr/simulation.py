"""Generative model for clustered semi-competing-risks data.

Per cluster, an outcome frailty ``gamma1`` (gamma, mean 1) and a
treatment-selection effect ``gamma2`` are linked through a normal copula.
Per subject: covariates x1 ~ N(0, 1) and x2 ~ N(1, 4); treatment from a
logistic model in x and gamma2; non-terminal and terminal event times from a
bivariate exponential with a Gumbel-Hougaard copula,

    P(T_H > y1, T_D > y2) = exp(-[(lam_H y1)^phi + (lam_D y2)^phi]^(1/phi)),

with proportional-hazards rates lam = gamma1 * base * exp(-eta * z + x beta);
and independent exponential censoring.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincinv, gammainccinv, ndtr

from .data import ClusterDataset, FilterReport, filter_single_arm_clusters
from .errors import ConvergenceError, ValidationError

X1_MEAN, X1_SD = 0.0, 1.0
X2_MEAN, X2_SD = 1.0, 2.0

# treatment-model coefficients for the standard designs
ALPHA_EQUAL_NORMAL = (-0.2, 0.5, 0.5)
ALPHA_UNEQUAL_NORMAL = (-1.8, 0.5, 0.5)
ALPHA_EQUAL_GAMMA = (-0.6, 0.5, 0.5)

DESK_REPS, DESK_B = 500, 200
FULL_SCALE_REPS = 3000

CALIBRATION_SEED = 20_210_917


class CalibrationError(ConvergenceError):
    """A Monte Carlo calibration could not bracket its target."""


@dataclass(frozen=True)
class ScenarioConfig:
    m: int = 20
    n_i: int = 50
    lambda_H: float = 0.1
    lambda_D: float = 0.08
    lambda_C: float = 0.09
    eta_H: float = 0.0
    eta_D: float = 0.0
    eta_C: float = 0.1
    beta1: tuple = (0.1, 0.3)
    beta2: tuple = (0.2, 0.4)
    alpha: tuple = ALPHA_EQUAL_NORMAL
    varphi: float = 2.0
    icc_target: float = 0.067
    gamma1_shape: float | None = None
    gamma2_dist: str = "normal"
    copula_rho: float = 0.4
    selection_sign: int = 1
    target_log_wr: float | None = None
    true_log_wr: float | None = None
    reps: int = DESK_REPS
    B: int = DESK_B
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        for f in ("beta1", "beta2", "alpha"):
            object.__setattr__(self, f, tuple(float(v) for v in getattr(self, f)))
        problems = []
        if self.m < 1 or self.n_i < 2:
            problems.append("need m >= 1 and n_i >= 2")
        if min(self.lambda_H, self.lambda_D, self.lambda_C) <= 0:
            problems.append("hazards must be positive")
        if self.varphi < 1:
            problems.append("varphi must be >= 1")
        if not 0 < self.icc_target < 1:
            problems.append("icc_target must lie in (0, 1)")
        if self.gamma1_shape is not None and self.gamma1_shape <= 0:
            problems.append("gamma1_shape must be positive")
        if self.gamma2_dist not in ("normal", "gamma"):
            problems.append("gamma2_dist must be 'normal' or 'gamma'")
        if self.selection_sign not in (1, -1):
            problems.append("selection_sign must be +1 or -1")
        if not -1 < self.copula_rho < 1:
            problems.append("copula_rho must lie in (-1, 1)")
        if len(self.beta1) != 2 or len(self.beta2) != 2 or len(self.alpha) != 3:
            problems.append("beta1/beta2 need 2 entries and alpha needs 3 (intercept first)")
        if self.reps < 1 or self.B < 0:
            problems.append("reps must be >= 1 and B >= 0")
        if problems:
            raise ValidationError("invalid scenario: " + "; ".join(problems))

    @property
    def n(self) -> int:
        return self.m * self.n_i

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in dataclasses.fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"paper_scale", "allocation"}
        if unknown:
            raise ValidationError(f"unknown scenario field(s): {sorted(unknown)}")
        d = dict(d)
        allocation = d.pop("allocation", None)
        if d.pop("paper_scale", False):
            d["reps"] = FULL_SCALE_REPS
        if allocation is not None and "alpha" not in d:
            d["alpha"] = alpha_for(allocation, d.get("gamma2_dist", "normal"))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"invalid scenario: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scenario is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValidationError("scenario JSON must be an object")
        return cls.from_dict(d)


def alpha_for(allocation: float, gamma2_dist: str = "normal") -> tuple:
    """Treatment-model coefficients for a 0.5 or 0.3 treated fraction."""
    if gamma2_dist == "gamma":
        if allocation != 0.5:
            raise ValidationError("the gamma selection-effect design is defined for 50% allocation only")
        return ALPHA_EQUAL_GAMMA
    if allocation == 0.5:
        return ALPHA_EQUAL_NORMAL
    if allocation == 0.3:
        return ALPHA_UNEQUAL_NORMAL
    raise ValidationError("allocation must be 0.5 or 0.3")


# -- cluster effects ------------------------------------------------------------------
@dataclass(frozen=True)
class ClusterEffects:
    gamma1: np.ndarray
    gamma2: np.ndarray


def _gamma_from_normal(score, shape, rate):
    """Gamma(shape, rate) quantile of Phi(score), accurate in both tails."""
    score = np.asarray(score, dtype=float)
    lower = gammaincinv(shape, ndtr(score))
    upper = gammainccinv(shape, ndtr(-score))
    return np.where(score <= 0, lower, upper) / rate


def _gamma1_from_score(score, shape):
    return _gamma_from_normal(score, shape, shape)


def _gamma2_from_score(score, dist):
    if dist == "normal":
        return 2.0 * score
    return _gamma_from_normal(score, 2.0, 10.0)


def _copula_scores(m, rho, rng):
    e = rng.standard_normal((m, 2))
    return e[:, 0], rho * e[:, 0] + math.sqrt(1.0 - rho * rho) * e[:, 1]


def sample_cluster_effects(cfg: ScenarioConfig, rng, m: int | None = None) -> ClusterEffects:
    """Draw (gamma1, gamma2) for ``m`` clusters (default ``cfg.m``)."""
    m = cfg.m if m is None else m
    s1, s2 = _copula_scores(m, cfg.copula_rho, rng)
    return ClusterEffects(_gamma1_from_score(s1, resolved_gamma1_shape(cfg)), _gamma2_from_score(s2, cfg.gamma2_dist))


# -- subject-level draws -------------------------------------------------------------
def sample_positive_stable(alpha: float, size, rng) -> np.ndarray:
    """Positive stable variates with Laplace transform exp(-s**alpha), 0 < alpha <= 1.

    Uses the Chambers-Mallows-Stuck (Kanter) representation.
    """
    if not 0 < alpha <= 1:
        raise ValidationError("stable index must lie in (0, 1]")
    u = rng.uniform(0.0, math.pi, size)
    w = rng.standard_exponential(size)
    if alpha == 1.0:
        return np.ones(size)
    a = np.sin(alpha * u) / np.sin(u) ** (1.0 / alpha)
    b = (np.sin((1.0 - alpha) * u) / w) ** ((1.0 - alpha) / alpha)
    return a * b


def _hazards(z, x, gamma1, cfg):
    lin_h = x @ np.asarray(cfg.beta1)
    lin_d = x @ np.asarray(cfg.beta2)
    lam_h = gamma1 * cfg.lambda_H * np.exp(-cfg.eta_H * z + lin_h)
    lam_d = gamma1 * cfg.lambda_D * np.exp(-cfg.eta_D * z + lin_d)
    return lam_h, lam_d


def sample_bivariate_times(z, x, gamma1, cfg: ScenarioConfig, rng):
    """(T_H, T_D) with exponential margins joined by a Gumbel-Hougaard copula.

    ``z``, ``gamma1`` are per-subject arrays and ``x`` is (n, 2).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    gamma1 = np.broadcast_to(np.asarray(gamma1, dtype=float), z.shape)
    n = z.shape[0]
    s = sample_positive_stable(1.0 / cfg.varphi, n, rng)
    e = rng.standard_exponential((n, 2))
    lam_h, lam_d = _hazards(z, x, gamma1, cfg)
    inv = 1.0 / cfg.varphi
    return (e[:, 0] / s) ** inv / lam_h, (e[:, 1] / s) ** inv / lam_d


def sample_censoring(z, cfg: ScenarioConfig, rng) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    rate = cfg.lambda_C * np.exp(-cfg.eta_C * z)
    return rng.standard_exponential(z.shape[0]) / rate


def treatment_probability(x, gamma2, cfg: ScenarioConfig) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.asarray(cfg.alpha)
    lin = a[0] + x @ a[1:] + cfg.selection_sign * np.asarray(gamma2, dtype=float)
    return 1.0 / (1.0 + np.exp(-lin))


def sample_treatment(x, gamma2, cfg: ScenarioConfig, rng) -> np.ndarray:
    p = treatment_probability(x, gamma2, cfg)
    return (rng.random(p.shape[0]) < p).astype(np.int8)


def sample_covariates(n, rng) -> np.ndarray:
    x = rng.standard_normal((n, 2))
    x[:, 0] = X1_MEAN + X1_SD * x[:, 0]
    x[:, 1] = X2_MEAN + X2_SD * x[:, 1]
    return x


@dataclass
class _Latent:
    """Draws that do not depend on the effect sizes, kept for reuse across probes."""

    m: int
    n_i: int
    score1: np.ndarray  # per cluster
    gamma2: np.ndarray  # per cluster
    x: np.ndarray
    z: np.ndarray
    s: np.ndarray
    e: np.ndarray  # (n, 2) unit exponentials for the event times
    e_c: np.ndarray  # unit exponentials for censoring


def _draw_latent(cfg, rng, m=None, randomize=False) -> _Latent:
    m = cfg.m if m is None else m
    n = m * cfg.n_i
    s1, s2 = _copula_scores(m, cfg.copula_rho, rng)
    gamma2 = _gamma2_from_score(s2, cfg.gamma2_dist)
    x = sample_covariates(n, rng)
    codes = np.repeat(np.arange(m), cfg.n_i)
    if randomize:
        z = (rng.random(n) < 0.5).astype(np.int8)
    else:
        z = sample_treatment(x, gamma2[codes], cfg, rng)
    s = sample_positive_stable(1.0 / cfg.varphi, n, rng)
    e = rng.standard_exponential((n, 2))
    e_c = rng.standard_exponential(n)
    return _Latent(m, cfg.n_i, s1, gamma2, x, z, s, e, e_c)


def _assemble(cfg, lat: _Latent, shape: float) -> ClusterDataset:
    codes = np.repeat(np.arange(lat.m, dtype=np.int64), lat.n_i)
    gamma1 = _gamma1_from_score(lat.score1, shape)[codes]
    zf = lat.z.astype(float)
    lam_h, lam_d = _hazards(zf, lat.x, gamma1, cfg)
    inv = 1.0 / cfg.varphi
    t_h = (lat.e[:, 0] / lat.s) ** inv / lam_h
    t_d = (lat.e[:, 1] / lat.s) ** inv / lam_d
    t_c = lat.e_c / (cfg.lambda_C * np.exp(-cfg.eta_C * zf))
    u_t = np.minimum(t_d, t_c)
    d_t = (t_d <= t_c).astype(np.int8)
    u_nt = np.minimum(t_h, u_t)
    d_nt = (t_h <= u_t).astype(np.int8)
    offsets = np.arange(lat.m + 1, dtype=np.int64) * lat.n_i
    return ClusterDataset._from_sorted(
        range(lat.m), codes, offsets, lat.z.copy(), u_nt, d_nt, u_t, d_t, lat.x.copy()
    )


def simulate_unfiltered(cfg: ScenarioConfig, rng, randomize: bool = False, m: int | None = None) -> ClusterDataset:
    """One dataset of exactly ``m * n_i`` subjects, single-arm clusters included."""
    lat = _draw_latent(cfg, rng, m=m, randomize=randomize)
    return _assemble(cfg, lat, resolved_gamma1_shape(cfg))


def simulate(cfg: ScenarioConfig, rng, randomize: bool = False, m: int | None = None):
    """One dataset and the report of clusters dropped for lacking an arm."""
    return filter_single_arm_clusters(simulate_unfiltered(cfg, rng, randomize, m))


def generate_dataset(cfg: ScenarioConfig, rng) -> ClusterDataset:
    return simulate(cfg, rng)[0]


# -- ICC calibration of the frailty -------------------------------------------------------
ICC_ESTIMAND = "one-way ANOVA ICC of log latent terminal-event time across clusters"


@dataclass(frozen=True)
class GammaShapeCalibration:
    shape: float
    achieved_icc: float
    estimand: str = ICC_ESTIMAND


def anova_icc(values: np.ndarray, n_per_cluster: int) -> float:
    """One-way ANOVA ICC for equal-sized clusters stored contiguously."""
    y = np.asarray(values, dtype=float).reshape(-1, n_per_cluster)
    k, n0 = y.shape
    means = y.mean(axis=1)
    msb = n0 * np.sum((means - y.mean()) ** 2) / (k - 1)
    msw = np.sum((y - means[:, None]) ** 2) / (k * (n0 - 1))
    return float((msb - msw) / (msb + (n0 - 1) * msw))


def _log_td_base(cfg, lat):
    # log T_D without the frailty term
    zf = lat.z.astype(float)
    lin = -cfg.eta_D * zf + lat.x @ np.asarray(cfg.beta2)
    return (np.log(lat.e[:, 1]) - np.log(lat.s)) / cfg.varphi - math.log(cfg.lambda_D) - lin


def calibrate_gamma1_shape(
    icc_target: float,
    cfg: ScenarioConfig,
    rng,
    n_clusters: int = 20_000,
    bracket: tuple = (0.05, 1e4),
    tol: float = 1e-4,
) -> GammaShapeCalibration:
    """Gamma frailty shape (rate = shape) that yields ``icc_target``.

    The ICC is the one-way ANOVA ICC of the log latent terminal-event time,
    estimated from one large simulated sample. The same draws are reused at
    every probe, so the bisection is over a smooth monotone function.
    """
    if not 0 < icc_target < 1:
        raise ValidationError("icc_target must lie in (0, 1)")
    lat = _draw_latent(cfg.replace(gamma1_shape=1.0), rng, m=n_clusters)
    base = _log_td_base(cfg, lat)
    codes = np.repeat(np.arange(n_clusters), cfg.n_i)

    def icc(a):
        return anova_icc(base - np.log(_gamma1_from_score(lat.score1, a))[codes], cfg.n_i)

    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    icc_lo, icc_hi = icc(math.exp(lo)), icc(math.exp(hi))
    if not icc_hi < icc_target < icc_lo:
        raise CalibrationError(
            f"ICC target {icc_target} outside the bracket [{icc_hi:.4f}, {icc_lo:.4f}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        v = icc(math.exp(mid))
        if v > icc_target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    shape = math.exp(0.5 * (lo + hi))
    return GammaShapeCalibration(shape, icc(shape))


@functools.lru_cache(maxsize=64)
def _default_shape(icc_target, key_cfg):
    rng = np.random.default_rng(CALIBRATION_SEED)
    return calibrate_gamma1_shape(icc_target, key_cfg, rng).shape


def _shape_key(cfg):
    # only fields that affect the ICC estimand
    return cfg.replace(
        reps=1, B=0, seed=0, name="", m=1, target_log_wr=None, true_log_wr=None, gamma1_shape=1.0
    )


def resolved_gamma1_shape(cfg: ScenarioConfig) -> float:
    if cfg.gamma1_shape is not None:
        return cfg.gamma1_shape
    return _default_shape(round(cfg.icc_target, 12), _shape_key(cfg))


# -- effect-size oracle ------------------------------------------------------------------
@dataclass(frozen=True)
class OracleResult:
    log_wr: float
    se: float


def _oracle_from_dataset(ds) -> OracleResult:
    from .estimator import stratified_estimate

    est = stratified_estimate(ds, np.ones(ds.n))
    dropped = set(est.excluded_clusters)
    comps = [c for c in est.per_cluster if c.cluster_id not in dropped]
    a = np.array([c.cluster_weight * c.tau1 for c in comps])
    b = np.array([c.cluster_weight * c.tau2 for c in comps])
    # linearisation of log(sum a / sum b) over independent clusters
    influence = a / a.sum() - b / b.sum()
    k = influence.size
    se = math.sqrt(k / max(k - 1, 1) * np.sum(influence**2))
    return OracleResult(est.log_wr, se)


def true_log_wr_oracle(cfg: ScenarioConfig, n_large: int, rng) -> OracleResult:
    """Estimand approximated on one large randomised, unconfounded sample.

    Treatment is assigned 1:1 independently of covariates and cluster
    effects; the stratified estimator with unit weights is then evaluated.
    Returns the estimate with its linearisation standard error.
    """
    m_large = max(2, n_large // cfg.n_i)
    ds, _ = simulate(cfg, rng, randomize=True, m=m_large)
    return _oracle_from_dataset(ds)


def calibrate_eta(
    cfg: ScenarioConfig,
    target_log_wr: float,
    n_large: int = 400_000,
    seed: int = CALIBRATION_SEED,
    bracket: tuple = (-3.0, 3.0),
    tol: float = 1e-4,
) -> float:
    """Common value eta = eta_H = eta_D whose oracle log win ratio hits the target.

    Common random numbers across probes make the oracle monotone in eta.
    """
    rng = np.random.default_rng(seed)
    m_large = max(2, n_large // cfg.n_i)
    lat = _draw_latent(cfg, rng, m=m_large, randomize=True)
    shape = resolved_gamma1_shape(cfg)

    def oracle(eta):
        ds, _ = filter_single_arm_clusters(_assemble(cfg.replace(eta_H=eta, eta_D=eta), lat, shape))
        return _oracle_from_dataset(ds).log_wr

    lo, hi = bracket
    f_lo, f_hi = oracle(lo), oracle(hi)
    if not f_lo < target_log_wr < f_hi:
        raise CalibrationError(f"target log win ratio {target_log_wr} outside [{f_lo:.3f}, {f_hi:.3f}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if oracle(mid) < target_log_wr:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def resolve_scenario(cfg: ScenarioConfig) -> ScenarioConfig:
    """Fill in the frailty shape, calibrated effect sizes and the true log win ratio."""
    if cfg.gamma1_shape is None:
        cfg = cfg.replace(gamma1_shape=resolved_gamma1_shape(cfg))
    if cfg.target_log_wr is not None and cfg.eta_H == 0 and cfg.eta_D == 0:
        eta = calibrate_eta(cfg, cfg.target_log_wr)
        cfg = cfg.replace(eta_H=eta, eta_D=eta)
    if cfg.true_log_wr is None:
        if cfg.eta_H == 0 and cfg.eta_D == 0:
            truth = 0.0
        elif cfg.target_log_wr is not None:
            truth = cfg.target_log_wr
        else:
            truth = true_log_wr_oracle(cfg, 400_000, np.random.default_rng(CALIBRATION_SEED + 1)).log_wr
        cfg = cfg.replace(true_log_wr=truth)
    return cfg
