import itertools

import numpy as np
import pytest

from cwr.data import ClusterDataset, CompositeOutcome
from cwr.kernel import phi1, phi2


def random_outcomes(rng, n, tie_prob=0.0):
    """Valid composite outcomes on a coarse integer grid (so exact ties occur)."""
    t_event = rng.integers(1, 15, size=(n, 3)).astype(float)  # non-terminal, terminal, censoring
    if tie_prob:
        same = rng.random(n) < tie_prob
        t_event[same, 1] = t_event[same, 2]
    u_t = np.minimum(t_event[:, 1], t_event[:, 2])
    d_t = (t_event[:, 1] <= t_event[:, 2]).astype(int)
    u_nt = np.minimum(t_event[:, 0], u_t)
    d_nt = (t_event[:, 0] <= u_t).astype(int)
    return u_nt, d_nt, u_t, d_t


def make_dataset(rng, sizes, p=2, confounding=0.0):
    """Clusters of the given sizes with both arms present in each."""
    n = int(sum(sizes))
    cluster = np.repeat(np.arange(len(sizes)), sizes)
    x = rng.normal(size=(n, p))
    prob = 1 / (1 + np.exp(-confounding * x.sum(axis=1)))
    z = (rng.random(n) < prob).astype(int)
    start = 0
    for size in sizes:
        z[start] = 1
        z[start + 1] = 0
        start += size
    u_nt, d_nt, u_t, d_t = random_outcomes(rng, n)
    return ClusterDataset(cluster, z, u_nt, d_nt, u_t, d_t, x)


def outcome(ds, i):
    return CompositeOutcome(
        float(ds.u_nonterminal[i]), int(ds.delta_nonterminal[i]), float(ds.u_terminal[i]), int(ds.delta_terminal[i])
    )


def brute_force_sums(ds, w, k=0):
    """Weighted treated-beats-control and control-beats-treated sums over all pairs of cluster k."""
    idx = range(ds.offsets[k], ds.offsets[k + 1])
    wins = losses = 0.0
    for a, b in itertools.combinations(idx, 2):
        if ds.treatment[a] == ds.treatment[b]:
            continue
        t, c = (a, b) if ds.treatment[a] == 1 else (b, a)
        wins += w[t] * w[c] * phi1(outcome(ds, t), outcome(ds, c))
        losses += w[t] * w[c] * phi2(outcome(ds, t), outcome(ds, c))
    return wins, losses


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def confounded(rng):
    return make_dataset(rng, [50] * 20, p=2, confounding=0.8)


def with_covariates(ds, X):
    """Copy of ``ds`` with its covariate matrix replaced."""
    return ClusterDataset(
        [ds.labels[c] for c in ds.codes], ds.treatment, ds.u_nonterminal, ds.delta_nonterminal,
        ds.u_terminal, ds.delta_terminal, X,
    )


# -- acceptance report ------------------------------------------------------------------------
_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Callable ``(criterion, passed, detail)`` that records one sub-check."""

    def record(criterion, passed, detail):
        _ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE, key=lambda c: (not c[0].isdigit(), c)):
        checks = _ACCEPTANCE[criterion]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        if criterion.startswith("info"):
            verdict = "INFO"
        details = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"{verdict}  {criterion}: {details}")
