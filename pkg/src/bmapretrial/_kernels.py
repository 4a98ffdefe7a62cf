"""Hot loops with a numba-compiled path and a plain numpy path.

The backend is fixed at import time: numba is used when it imports and
``BMAPRETRIAL_DISABLE_NUMBA`` is unset (or ``0``). Otherwise every loop runs
as ordinary Python over numpy arrays. Comparing the two paths therefore
needs two processes; the tests and the benchmark do that.
"""
import os

import numpy as np

ENV_FLAG = "BMAPRETRIAL_DISABLE_NUMBA"

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False


def numba_disabled_by_env():
    return os.environ.get(ENV_FLAG, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = NUMBA_AVAILABLE and not numba_disabled_by_env()
BACKEND = "numba" if USE_NUMBA else "numpy"


def _identity(f):
    return f


_jit = njit(cache=True, nogil=True) if USE_NUMBA else _identity


# ---------------------------------------------------------------------------
# convolution of (n, P, Q) by (m, Q, R) sequences, truncated at index K
# ---------------------------------------------------------------------------


def conv_np(a, b, K):
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    out = np.zeros((K + 1, a.shape[1], b.shape[2]))
    # loop over the shorter operand, vectorise over the longer one
    if b.shape[0] <= a.shape[0]:
        for l in range(min(b.shape[0], K + 1)):
            n = min(a.shape[0], K + 1 - l)
            out[l:l + n] += np.matmul(a[:n], b[l])
    else:
        for l in range(min(a.shape[0], K + 1)):
            n = min(b.shape[0], K + 1 - l)
            out[l:l + n] += np.matmul(a[l], b[:n])
    return out


def _conv_loop(a, b, K):
    na, P, Q = a.shape
    nb, _, R = b.shape
    out = np.zeros((K + 1, P, R))
    for k in range(K + 1):
        lo = max(0, k - na + 1)
        hi = min(k, nb - 1)
        for l in range(lo, hi + 1):
            ak = a[k - l]
            bl = b[l]
            for i in range(P):
                for p in range(Q):
                    v = ak[i, p]
                    if v != 0.0:
                        for j in range(R):
                            out[k, i, j] += v * bl[p, j]
    return out


# ---------------------------------------------------------------------------
# Neumann-type recursion y(k) = sum_{l=1}^{k} y(k-l) R(l), y(0) given
# ---------------------------------------------------------------------------


def neumann_np(y0, R, K):
    y0 = np.asarray(y0, dtype=float)
    R = np.ascontiguousarray(R, dtype=float)
    y = np.zeros((K + 1,) + y0.shape)
    y[0] = y0
    nR = R.shape[0]
    for k in range(1, K + 1):
        L = min(k, nR - 1)
        if L < 1:
            continue
        # y(k-1), ..., y(k-L) against R(1), ..., R(L)
        y[k] = np.einsum("lip,lpj->ij", y[k - 1:k - L - 1 if k - L - 1 >= 0 else None:-1], R[1:L + 1])
    return y


def _neumann_loop(y0, R, K):
    P, M = y0.shape
    nR = R.shape[0]
    y = np.zeros((K + 1, P, M))
    y[0] = y0
    for k in range(1, K + 1):
        L = min(k, nR - 1)
        for l in range(1, L + 1):
            yl = y[k - l]
            Rl = R[l]
            for i in range(P):
                for p in range(M):
                    v = yl[i, p]
                    if v != 0.0:
                        for j in range(M):
                            y[k, i, j] += v * Rl[p, j]
    return y


# ---------------------------------------------------------------------------
# backward Horner accumulation: H(n) = top, H(k) = A(k) + H(k+1) G
# ---------------------------------------------------------------------------


def horner_all_np(A, G, top):
    n = A.shape[0]
    H = np.empty((n + 1,) + top.shape)
    H[n] = top
    for k in range(n - 1, -1, -1):
        H[k] = A[k] + H[k + 1] @ G
    return H


def _horner_all_loop(A, G, top):
    n, M, _ = A.shape
    H = np.empty((n + 1, M, M))
    H[n] = top
    for k in range(n - 1, -1, -1):
        for i in range(M):
            for j in range(M):
                s = A[k, i, j]
                for p in range(M):
                    s += H[k + 1, i, p] * G[p, j]
                H[k, i, j] = s
    return H


@_jit
def _matmul_small(a, b, out):
    """out = a @ b for small matrices without a BLAS call."""
    n, q = a.shape
    r = b.shape[1]
    for i in range(n):
        for j in range(r):
            s = 0.0
            for p in range(q):
                s += a[i, p] * b[p, j]
            out[i, j] = s


def _matmul_np(a, b, out):
    np.matmul(a, b, out=out)


_matmul_into = _matmul_small if USE_NUMBA else _matmul_np


@_jit
def _spread(P):
    """Largest column-wise gap between rows; zero for a rank-one e*v matrix."""
    M = P.shape[0]
    worst = 0.0
    for j in range(M):
        lo = P[0, j]
        hi = P[0, j]
        for i in range(1, M):
            if P[i, j] < lo:
                lo = P[i, j]
            if P[i, j] > hi:
                hi = P[i, j]
        if hi - lo > worst:
            worst = hi - lo
    return worst

@_jit
def _level_products(Glist, j, mmax, eps, P):
    """Fill P[m] = G_{j+m} ... G_{j+1}, m = 0..m0, stopping once rank one.

    ``P`` is a caller-owned buffer of shape (mmax + 1, M, M). Returns m0.
    """
    M = Glist.shape[1]
    top = Glist.shape[0] - 1
    for r in range(M):
        for c in range(M):
            P[0, r, c] = 1.0 if r == c else 0.0
    for m in range(1, mmax + 1):
        _matmul_into(Glist[min(j + m, top)], P[m - 1], P[m])
        if _spread(P[m]) < eps:
            return m
    return mmax

@_jit
def level_sweep(A, DA, Abar, DAbar, C, mu, theta, Glimit, n_star, mmax, eps):
    """One downward pass n = n_star..1 computing G_n, U_n(0) and N_n.

    Levels above n_star use the limit matrix. Returns arrays indexed by level
    (index 0 unused) plus the worst rank-one closure gap and longest horizon.
    """
    M = C.shape[0]
    scale = mu + theta
    Glist = np.empty((n_star + 2, M, M))
    Ulist = np.zeros((n_star + 2, M, M))
    Nlist = np.zeros((n_star + 2, M, M))
    Glist[n_star + 1] = Glimit
    Glist[0] = Glimit
    A0 = A[0] * (mu / scale)
    eye = np.eye(M)
    P = np.empty((mmax + 1, M, M))
    tmp = np.empty((M, M))
    S = np.empty((M, M))
    T = np.empty((M, M))
    worst_gap = 0.0
    longest = 0
    for n in range(n_star, 0, -1):
        m0 = _level_products(Glist, n, mmax, eps, P)
        gap = _spread(P[m0])
        if gap > worst_gap:
            worst_gap = gap
        if m0 > longest:
            longest = m0
        S[:] = 0.0
        T[:] = 0.0
        for m in range(m0):
            _matmul_into(A[1 + m], P[m], tmp)
            S += tmp
            _matmul_into(DA[1 + m], P[m], tmp)
            T += tmp
        for i in range(M):
            sa = 0.0
            sd = 0.0
            for p in range(M):
                sa += Abar[m0, i, p]
                sd += DAbar[m0, i, p]
            for c in range(M):
                S[i, c] += sa * P[m0, 0, c]
                T[i, c] += sd * P[m0, 0, c]
        U = Ulist[n]
        for i in range(M):
            for c in range(M):
                U[i, c] = (theta * eye[i, c] + C[i, c] / n + mu * S[i, c] + T[i, c] / n) / scale
                tmp[i, c] = eye[i, c] - U[i, c]
        Nlist[n] = np.linalg.inv(tmp)
        _matmul_into(Nlist[n], A0, Glist[n])
    return Glist, Ulist, Nlist, worst_gap, longest


@_jit
def _q_recursion_loop(q0, A, DA, Abar, DAbar, Glist, Nlist, mu, theta, K, mmax, eps):
    """q(j) = sum_{n<j} q(n) R_n(j-n), evaluated without storing the R table."""
    M = q0.shape[0]
    scale = mu + theta
    q = np.zeros((K + 1, M))
    q[0] = q0
    # per-level weights: level 0 has no retrial term and unit arrival weight
    wa = np.empty(K + 1)
    wd = np.empty(K + 1)
    wa[0] = 0.0
    wd[0] = 1.0
    for n in range(1, K + 1):
        wa[n] = mu
        wd[n] = 1.0 / n
    P = np.empty((mmax + 1, M, M))
    row = np.empty(M)
    acc = np.empty(M)
    for j in range(1, K + 1):
        m0 = _level_products(Glist, j, mmax, eps, P)
        acc[:] = 0.0
        for m in range(m0):
            row[:] = 0.0
            for n in range(j):
                idx = j - n + 1 + m
                for p in range(M):
                    qa = q[n, p] * wa[n]
                    qd = q[n, p] * wd[n]
                    for r in range(M):
                        row[r] += qa * A[idx, p, r] + qd * DA[idx, p, r]
            for r in range(M):
                for c in range(M):
                    acc[c] += row[r] * P[m, r, c]
        # rank-one closure of the m-sum
        tot = 0.0
        for n in range(j):
            idx = j - n + m0
            for p in range(M):
                qa = q[n, p] * wa[n]
                qd = q[n, p] * wd[n]
                for r in range(M):
                    tot += qa * Abar[idx, p, r] + qd * DAbar[idx, p, r]
        for c in range(M):
            acc[c] += tot * P[m0, 0, c]
        for c in range(M):
            s = 0.0
            for r in range(M):
                s += acc[r] * Nlist[j, r, c]
            q[j, c] = s / scale
    return q



def q_recursion_np(q0, A, DA, Abar, DAbar, Glist, Nlist, mu, theta, K, mmax, eps):
    M = q0.shape[0]
    scale = mu + theta
    q = np.zeros((K + 1, M))
    q[0] = q0
    wa = np.full(K + 1, mu)
    wa[0] = 0.0
    wd = 1.0 / np.maximum(np.arange(K + 1), 1)
    P = np.empty((mmax + 1, M, M))
    for j in range(1, K + 1):
        m0 = _level_products(Glist, j, mmax, eps, P)
        qa = q[:j] * wa[:j, None]
        qd = q[:j] * wd[:j, None]
        acc = np.zeros(M)
        for m in range(m0):
            idx = j + 1 + m - np.arange(j)
            row = np.einsum("np,npr->r", qa, A[idx]) + np.einsum("np,npr->r", qd, DA[idx])
            acc += row @ P[m]
        idx = j + m0 - np.arange(j)
        tot = np.einsum("np,npr->", qa, Abar[idx]) + np.einsum("np,npr->", qd, DAbar[idx])
        acc += tot * P[m0][0]
        q[j] = (acc @ Nlist[j]) / scale
    return q


# ---------------------------------------------------------------------------
# discrete-event simulation inner loops
# ---------------------------------------------------------------------------
# state_f = [time, remaining service]; state_i = [phase, orbit or queue,
# busy, events, arrivals, completions, overflow flag]


@_jit
def sim_retrial(state_f, state_i, u, sv, rate_out, cum, codes, M, mu,
                     warmup, total, occ):
    ui = 0
    si = 0
    nu = u.shape[0]
    ns = sv.shape[0]
    top = occ.shape[0] - 1
    while state_i[3] < total and ui + 2 <= nu and si + 1 <= ns:
        j = state_i[0]
        n = state_i[1]
        b = state_i[2]
        retry = n * mu if b == 0 else 0.0
        rate = rate_out[j] + retry
        dt = -np.log1p(-u[ui])
        ui += 1
        dt = dt / rate
        counted = state_i[3] >= warmup
        if b == 1 and state_f[1] <= dt:
            dt = state_f[1]
            if counted:
                lvl = n if n < top else top
                occ[lvl, 1, j] += dt
            state_f[0] += dt
            state_f[1] = 0.0
            state_i[2] = 0
            state_i[5] += 1
        else:
            if counted:
                lvl = n if n < top else top
                occ[lvl, b, j] += dt
            state_f[0] += dt
            if b == 1:
                state_f[1] -= dt
            x = u[ui] * rate
            ui += 1
            if x < retry:
                state_i[1] = n - 1
                state_i[2] = 1
                state_f[1] = sv[si]
                si += 1
            else:
                x = (x - retry) / rate_out[j]
                c = cum[j]
                e = 0
                last = c.shape[0] - 1
                while e < last and c[e] <= x:
                    e += 1
                code = codes[e]
                k = code // M
                state_i[0] = code - k * M
                if k > 0:
                    state_i[4] += k
                    if b == 0:
                        state_i[2] = 1
                        state_f[1] = sv[si]
                        si += 1
                        state_i[1] = n + k - 1
                    else:
                        state_i[1] = n + k
        if state_i[1] >= top:
            state_i[6] = 1
        state_i[3] += 1
    return ui, si


@_jit
def sim_standard(state_f, state_i, u, sv, rate_out, cum, codes, M,
                      warmup, total, occ):
    ui = 0
    si = 0
    nu = u.shape[0]
    ns = sv.shape[0]
    top = occ.shape[0] - 1
    while state_i[3] < total and ui + 2 <= nu and si + 2 <= ns:
        j = state_i[0]
        L = state_i[1]
        rate = rate_out[j]
        dt = -np.log1p(-u[ui]) / rate
        ui += 1
        counted = state_i[3] >= warmup
        lvl = L if L < top else top
        if L > 0 and state_f[1] <= dt:
            dt = state_f[1]
            if counted:
                occ[lvl, j] += dt
            state_f[0] += dt
            state_i[1] = L - 1
            state_i[5] += 1
            if L - 1 > 0:
                state_f[1] = sv[si]
                si += 1
            else:
                state_f[1] = 0.0
        else:
            if counted:
                occ[lvl, j] += dt
            state_f[0] += dt
            if L > 0:
                state_f[1] -= dt
            x = u[ui]
            ui += 1
            c = cum[j]
            e = 0
            last = c.shape[0] - 1
            while e < last and c[e] <= x:
                e += 1
            code = codes[e]
            k = code // M
            state_i[0] = code - k * M
            if k > 0:
                state_i[4] += k
                if L == 0:
                    state_f[1] = sv[si]
                    si += 1
                state_i[1] = L + k
        if state_i[1] >= top:
            state_i[6] = 1
        state_i[3] += 1
    return ui, si


# ---------------------------------------------------------------------------
# dispatch table
# ---------------------------------------------------------------------------

ACTIVE = {
    "conv": _jit(_conv_loop) if USE_NUMBA else conv_np,
    "neumann": _jit(_neumann_loop) if USE_NUMBA else neumann_np,
    "horner_all": _jit(_horner_all_loop) if USE_NUMBA else horner_all_np,
    "level_sweep": level_sweep,
    "q_recursion": _q_recursion_loop if USE_NUMBA else q_recursion_np,
    "sim_retrial": sim_retrial,
    "sim_standard": sim_standard,
}


def kernel(name):
    """Return the active implementation of a hot loop."""
    return ACTIVE[name]
