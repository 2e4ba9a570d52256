"""Time the numba and numpy versions of the hot kernels on simulated data.

    python bench/benchmark_kernels.py [--m 20] [--n-i 50] [--repeat 20]

Both versions are always importable; ``CWR_DISABLE_NUMBA`` only changes
which one the library dispatches to, so this script calls them directly.
"""

import argparse
import timeit

import numpy as np

from cwr import _kernels
from cwr._accel import HAVE_NUMBA
from cwr.simulation import ScenarioConfig, simulate_unfiltered


def best_of(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--m", type=int, default=20, help="clusters")
    parser.add_argument("--n-i", type=int, default=50, help="subjects per cluster")
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    cfg = ScenarioConfig(m=args.m, n_i=args.n_i, gamma1_shape=4.0)
    ds = simulate_unfiltered(cfg, np.random.default_rng(0))
    w = np.random.default_rng(1).uniform(0.5, 2.0, ds.n)

    y = ds.treatment.astype(np.float64)
    eta = np.random.default_rng(2).normal(scale=0.5, size=ds.n)
    b = np.zeros(ds.m)

    cases = {
        "win/loss sums": (
            lambda: _kernels.dataset_win_loss_sums(ds, w, impl=_kernels.win_loss_sums_numba),
            lambda: _kernels.dataset_win_loss_sums(ds, w, impl=_kernels.win_loss_sums_numpy),
        ),
        "Laplace log-likelihood": (
            lambda: _kernels.laplace_loglik_numba(eta, y, ds.offsets, 1.0, b.copy(), _kernels.LOGIT, 1e-10),
            lambda: _kernels.laplace_loglik_numpy(eta, y, ds.offsets, 1.0, b.copy(), _kernels.LOGIT, 1e-10),
        ),
    }
    print(f"{ds.m} clusters x {args.n_i} subjects, best of {args.repeat}")
    print(f"{'kernel':<24}{'numba (ms)':>12}{'numpy (ms)':>12}{'speed-up':>10}")
    for name, (fast, slow) in cases.items():
        t_fast, t_slow = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<24}{1e3 * t_fast:>12.3f}{1e3 * t_slow:>12.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
