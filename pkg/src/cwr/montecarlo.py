"""Monte Carlo harness: bias, SEs, rejection rate and coverage per estimator."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import CwrError, ValidationError
from .inference import Z_975, bootstrap
from .pipeline import pipeline_from_name
from .simulation import ScenarioConfig, generate_dataset, resolve_scenario

FAILURE_FLAG_THRESHOLD = 0.5
METRIC_COLUMNS = (
    "scenario",
    "estimator",
    "reps",
    "failures",
    "true_log_wr",
    "mean_log_wr",
    "bias",
    "empirical_se",
    "estimated_se",
    "rejection_rate",
    "coverage",
    "flagged",
)


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    estimator: str
    reps: int
    failures: int
    true_log_wr: float
    mean_log_wr: float
    bias: float
    empirical_se: float
    estimated_se: float
    rejection_rate: float
    coverage: float
    flagged: bool

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


@dataclass
class Trace:
    """Per-replicate results for one estimator; NaN marks a failed replicate."""

    log_wr: np.ndarray
    se: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.log_wr)


@dataclass
class MonteCarloResult:
    config: ScenarioConfig
    rows: list
    traces: dict = field(repr=False)

    def row(self, estimator: str) -> MetricsRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    @property
    def any_flagged(self) -> bool:
        return any(r.flagged for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(v) for v in r.as_tuple()])
        return buf.getvalue()

    def traces_csv(self) -> str:
        names = list(self.traces)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rep"] + [f"{n}_{k}" for n in names for k in ("log_wr", "se")])
        reps = len(next(iter(self.traces.values())).log_wr) if names else 0
        for i in range(reps):
            row = [i]
            for n in names:
                row += [_fmt(self.traces[n].log_wr[i]), _fmt(self.traces[n].se[i])]
            writer.writerow(row)
        return buf.getvalue()

    def to_markdown(self) -> str:
        head = "| Estimator | Bias | Empirical SE | Estimated SE | Rejection rate | Coverage | Failures |"
        lines = [head, "|---|---:|---:|---:|---:|---:|---:|"]
        for r in self.rows:
            flag = " (flagged)" if r.flagged else ""
            lines.append(
                f"| {r.estimator}{flag} | {_num(r.bias)} | {_num(r.empirical_se)} | {_num(r.estimated_se)} "
                f"| {_num(r.rejection_rate)} | {_num(r.coverage)} | {r.failures}/{r.reps} |"
            )
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return v


def _num(v):
    return "NA" if math.isnan(v) else f"{v:.3f}"


def _mean(values):
    return math.fsum(values) / len(values) if len(values) else float("nan")


def _sd(values):
    k = len(values)
    if k < 2:
        return float("nan")
    mean = math.fsum(values) / k
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (k - 1))


def replicate_seeds(seed: int, rep: int) -> tuple[np.random.Generator, int]:
    """Data generator and bootstrap seed for replicate ``rep``."""
    data_rng = np.random.default_rng([seed, rep, 0])
    boot_seed = int(np.random.SeedSequence([seed, rep, 1]).generate_state(1)[0])
    return data_rng, boot_seed


def _one_replicate(cfg, pipelines, boot_for, B, seed, rep):
    data_rng, boot_seed = replicate_seeds(seed, rep)
    out = []
    try:
        ds = generate_dataset(cfg, data_rng)
    except CwrError:
        return [(math.nan, math.nan)] * len(pipelines)
    for p, use_boot in zip(pipelines, boot_for):
        try:
            point = p.estimate(ds).log_wr
        except (CwrError, np.linalg.LinAlgError, FloatingPointError):
            out.append((math.nan, math.nan))
            continue
        se = math.nan
        if B > 0 and use_boot:
            try:
                se = bootstrap(ds, p, B, boot_seed, point=point).se_log_wr
            except CwrError:
                pass
        out.append((point, se))
    return out


def _run_reps(cfg, pipelines, boot_for, B, seed, reps):
    return [_one_replicate(cfg, pipelines, boot_for, B, seed, r) for r in reps]


def run_monte_carlo(
    cfg: ScenarioConfig,
    estimators,
    reps: int | None = None,
    B: int | None = None,
    seed: int | None = None,
    n_jobs: int = 1,
    no_bootstrap=(),
) -> MonteCarloResult:
    """Simulate ``reps`` datasets and evaluate every estimator on each.

    All estimators see the same datasets and, for the bootstrap, the same
    resampling seed. Estimator names are those accepted by
    ``pipeline_from_name`` (for example ``"calibration-cloglog"``). With
    ``B = 0``, or for names listed in ``no_bootstrap``, only point estimates
    are produced and the SE-based metrics are NaN.

    A replicate whose estimator raises is recorded as a failure for that
    estimator; a row is flagged when more than half of the replicates fail.
    """
    reps = cfg.reps if reps is None else reps
    B = cfg.B if B is None else B
    seed = cfg.seed if seed is None else seed
    if reps < 2:
        raise ValidationError("reps must be at least 2")
    if B < 0 or B == 1:
        raise ValidationError("B must be 0 or at least 2")
    names = list(dict.fromkeys(estimators))
    if not names:
        raise ValidationError("no estimators requested")
    pipelines = [pipeline_from_name(n) for n in names]
    boot_for = [n not in set(no_bootstrap) for n in names]
    cfg = resolve_scenario(cfg.replace(reps=reps, B=B, seed=seed))
    truth = cfg.true_log_wr

    if n_jobs > 1:
        chunks = [list(range(j, reps, n_jobs)) for j in range(n_jobs)]
        results = [None] * reps
        with ProcessPoolExecutor(n_jobs) as pool:
            futures = [pool.submit(_run_reps, cfg, pipelines, boot_for, B, seed, c) for c in chunks]
            for c, fut in zip(chunks, futures):
                for r, v in zip(c, fut.result()):
                    results[r] = v
    else:
        results = _run_reps(cfg, pipelines, boot_for, B, seed, range(reps))

    rows, traces = [], {}
    for k, name in enumerate(names):
        est = np.array([results[r][k][0] for r in range(reps)])
        se = np.array([results[r][k][1] for r in range(reps)])
        traces[name] = Trace(est, se)
        good = est[np.isfinite(est)]
        failures = reps - good.size
        with_se = np.isfinite(est) & np.isfinite(se) & (se > 0)
        e, s = est[with_se], se[with_se]
        mean = _mean(good.tolist())
        rejection = float(np.mean(np.abs(e / s) > Z_975)) if e.size else math.nan
        coverage = float(np.mean(np.abs(e - truth) <= Z_975 * s)) if e.size else math.nan
        rows.append(
            MetricsRow(
                scenario=cfg.name,
                estimator=name,
                reps=reps,
                failures=failures,
                true_log_wr=float(truth),
                mean_log_wr=mean,
                bias=mean - truth,
                empirical_se=_sd(good.tolist()),
                estimated_se=_mean(s.tolist()),
                rejection_rate=rejection,
                coverage=coverage,
                flagged=failures > FAILURE_FLAG_THRESHOLD * reps,
            )
        )
    return MonteCarloResult(cfg, rows, traces)


def normality_screen(values) -> tuple[float, float]:
    """Skewness and excess kurtosis of the standardised finite values."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 3:
        raise ValidationError("normality screen needs at least three values")
    std = (v - v.mean()) / v.std(ddof=1)
    return float(stats.skew(std)), float(stats.kurtosis(std))
