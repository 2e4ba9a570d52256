"""Hot loops: within-cluster weighted win/loss sums.

Each function has a numba implementation and a pure-numpy one with identical
semantics; ``win_loss_sums`` is bound to one of them by ``cwr._accel``.
"""

import numpy as np

from ._accel import njit, select


@njit
def win_loss_sums_numba(offsets, z, w, unt, dnt, ut, dt):
    m = offsets.shape[0] - 1
    wins = np.zeros(m)
    losses = np.zeros(m)
    w_treated = np.zeros(m)
    w_control = np.zeros(m)
    size = offsets[m] - offsets[0]
    # controls copied to contiguous buffers so the inner loop is branch-free
    c_w = np.empty(size)
    c_unt = np.empty(size)
    c_ut = np.empty(size)
    c_dnt = np.empty(size, dtype=np.bool_)
    c_dt = np.empty(size, dtype=np.bool_)
    for k in range(m):
        nc = 0
        for j in range(offsets[k], offsets[k + 1]):
            if z[j] == 0:
                c_w[nc] = w[j]
                c_unt[nc] = unt[j]
                c_ut[nc] = ut[j]
                c_dnt[nc] = dnt[j] == 1
                c_dt[nc] = dt[j] == 1
                nc += 1
                w_control[k] += w[j]
            else:
                w_treated[k] += w[j]
        for a in range(offsets[k], offsets[k + 1]):
            if z[a] != 1:
                continue
            a_unt = unt[a]
            a_ut = ut[a]
            a_dnt = dnt[a] == 1
            a_dt = dt[a] == 1
            sw = 0.0
            sl = 0.0
            for t in range(nc):
                term_win = c_dt[t] and c_ut[t] < a_ut
                term_loss = a_dt and a_ut < c_ut[t]
                open_ = not (term_win or term_loss)
                nt_win = open_ and c_dnt[t] and c_unt[t] < a_unt
                nt_loss = open_ and a_dnt and a_unt < c_unt[t]
                sw += c_w[t] * (term_win or nt_win)
                sl += c_w[t] * (term_loss or nt_loss)
            wins[k] += w[a] * sw
            losses[k] += w[a] * sl
    return wins, losses, w_treated, w_control


def win_loss_sums_numpy(offsets, z, w, unt, dnt, ut, dt):
    m = offsets.shape[0] - 1
    wins = np.zeros(m)
    losses = np.zeros(m)
    w_treated = np.zeros(m)
    w_control = np.zeros(m)
    for k in range(m):
        s = slice(offsets[k], offsets[k + 1])
        zk = z[s]
        A = zk == 1
        B = zk == 0
        wa, wb = w[s][A], w[s][B]
        w_treated[k] = wa.sum()
        w_control[k] = wb.sum()
        if not wa.size or not wb.size:
            continue
        ut_a, ut_b = ut[s][A][:, None], ut[s][B][None, :]
        dt_a, dt_b = dt[s][A][:, None] == 1, dt[s][B][None, :] == 1
        unt_a, unt_b = unt[s][A][:, None], unt[s][B][None, :]
        dnt_a, dnt_b = dnt[s][A][:, None] == 1, dnt[s][B][None, :] == 1
        term_win = dt_b & (ut_b < ut_a)
        term_loss = dt_a & (ut_a < ut_b)
        open_ = ~(term_win | term_loss)
        nt_win = open_ & dnt_b & (unt_b < unt_a)
        nt_loss = open_ & ~nt_win & dnt_a & (unt_a < unt_b)
        wins[k] = wa @ ((term_win | nt_win) @ wb)
        losses[k] = wa @ ((term_loss | nt_loss) @ wb)
    return wins, losses, w_treated, w_control


win_loss_sums = select(win_loss_sums_numba, win_loss_sums_numpy)


def dataset_win_loss_sums(ds, w, impl=None):
    """Per-cluster Σ w_t w_c φ1(t, c), Σ w_t w_c φ2(t, c) and arm weight totals."""
    fn = impl or win_loss_sums
    return fn(
        ds.offsets,
        ds.treatment,
        np.ascontiguousarray(w, dtype=np.float64),
        ds.u_nonterminal,
        ds.delta_nonterminal,
        ds.u_terminal,
        ds.delta_terminal,
    )


# -- random-intercept Laplace objective ---------------------------------------
# link codes: 0 = logit, 1 = cloglog
LOGIT, CLOGLOG = 0, 1


@njit
def _bernoulli_terms(y, eta, link):
    """Log-likelihood, first and second derivative in eta for one observation."""
    if link == 0:
        if eta >= 0:
            e = np.exp(-eta)
            log_p = -np.log1p(e)
            log_q = -eta - np.log1p(e)
            p = 1.0 / (1.0 + e)
        else:
            e = np.exp(eta)
            log_p = eta - np.log1p(e)
            log_q = -np.log1p(e)
            p = e / (1.0 + e)
        ll = log_p if y == 1 else log_q
        return ll, y - p, -p * (1.0 - p)
    u = np.exp(eta)
    if y == 0:
        return -u, -u, -u
    if u > 50.0:
        t = u * np.exp(-u)
        return np.log(-np.expm1(-u)), t, t * (1.0 - u)
    em1 = np.expm1(u)
    if u < 1e-300:
        return eta, 1.0, 0.0
    d1 = u / em1
    d2 = u * (em1 - u * (em1 + 1.0)) / (em1 * em1)
    return np.log(-np.expm1(-u)), d1, d2


@njit
def laplace_loglik_numba(eta_fixed, y, offsets, sigma, b, link, tol):
    """Laplace-approximated marginal log-likelihood; updates modes ``b`` in place."""
    m = offsets.shape[0] - 1
    s2 = sigma * sigma
    total = 0.0
    for k in range(m):
        lo = offsets[k]
        hi = offsets[k + 1]
        if s2 < 1e-24:
            b[k] = 0.0
            for j in range(lo, hi):
                ll, d1, d2 = _bernoulli_terms(y[j], eta_fixed[j], link)
                total += ll
            continue
        bk = b[k]
        for _ in range(100):
            g = -bk / s2
            h = 1.0 / s2
            for j in range(lo, hi):
                ll, d1, d2 = _bernoulli_terms(y[j], eta_fixed[j] + bk, link)
                g += d1
                h -= d2
            step = g / h
            bk += step
            if abs(step) < tol:
                break
        ll_sum = 0.0
        info = 0.0
        for j in range(lo, hi):
            ll, d1, d2 = _bernoulli_terms(y[j], eta_fixed[j] + bk, link)
            ll_sum += ll
            info -= d2
        b[k] = bk
        total += ll_sum - 0.5 * bk * bk / s2 - 0.5 * np.log1p(s2 * info)
    return total


def _bernoulli_terms_np(y, eta, link):
    if link == LOGIT:
        log_p = -np.logaddexp(0.0, -eta)
        log_q = -np.logaddexp(0.0, eta)
        p = np.exp(log_p)
        ll = np.where(y == 1, log_p, log_q)
        return ll, y - p, -p * (1.0 - p)
    u = np.exp(eta)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        em1 = np.expm1(u)
        d1_1 = np.where(u > 50.0, u * np.exp(-u), u / em1)
        d2_1 = np.where(
            u > 50.0, u * np.exp(-u) * (1.0 - u), u * (em1 - u * (em1 + 1.0)) / (em1 * em1)
        )
        ll_1 = np.log(-np.expm1(-u))
    small = u < 1e-300
    d1_1 = np.where(small, 1.0, d1_1)
    d2_1 = np.where(small, 0.0, d2_1)
    ll_1 = np.where(small, eta, ll_1)
    one = y == 1
    return np.where(one, ll_1, -u), np.where(one, d1_1, -u), np.where(one, d2_1, -u)


def laplace_loglik_numpy(eta_fixed, y, offsets, sigma, b, link, tol):
    m = offsets.shape[0] - 1
    codes = np.repeat(np.arange(m), np.diff(offsets))
    s2 = sigma * sigma
    if s2 < 1e-24:
        b[:] = 0.0
        return float(_bernoulli_terms_np(y, eta_fixed, link)[0].sum())
    bk = b.copy()
    active = np.ones(m, dtype=bool)
    for _ in range(100):
        _, d1, d2 = _bernoulli_terms_np(y, eta_fixed + bk[codes], link)
        g = np.bincount(codes, weights=d1, minlength=m) - bk / s2
        h = 1.0 / s2 - np.bincount(codes, weights=d2, minlength=m)
        step = np.where(active, g / h, 0.0)
        bk += step
        active &= np.abs(step) >= tol
        if not active.any():
            break
    ll, _, d2 = _bernoulli_terms_np(y, eta_fixed + bk[codes], link)
    ll_sum = np.bincount(codes, weights=ll, minlength=m)
    info = -np.bincount(codes, weights=d2, minlength=m)
    b[:] = bk
    return float(np.sum(ll_sum - 0.5 * bk * bk / s2 - 0.5 * np.log1p(s2 * info)))


laplace_loglik = select(laplace_loglik_numba, laplace_loglik_numpy)
