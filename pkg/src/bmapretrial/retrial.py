"""BMAP/GI/1 retrial queue via the reweighted, uniformized level-dependent chain.

The idle-server orbit distribution p0(k) is reweighted to q(k) ∝ max(k,1) p0(k),
which is the stationary vector of a level-dependent M/G/1-type chain whose
blocks converge to a level-independent limit. The limit chain is solved with
the standard machinery, the level-dependent G-matrices by one downward sweep,
and q by the level-wise R-recursion.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels, mg1
from .arrivals import stationary_vector
from .matseq import MatrixSeq

MIX_EPS = 1e-13


@dataclass(frozen=True)
class RetrialBlocks:
    """Blocks of the censored generator and of its uniformized reweighting.

    Arrays ``A``, ``DA`` run over k = 0..KA; ``Abar``/``DAbar`` are their tail
    sums closed with the full totals.
    """

    mu: float
    theta: float
    C: np.ndarray
    D: np.ndarray
    D_seq: np.ndarray
    A: np.ndarray
    DA: np.ndarray
    Abar: np.ndarray
    DAbar: np.ndarray
    A_total: np.ndarray
    A_mean: np.ndarray
    rho: float
    noise: float = 0.0

    @property
    def M(self):
        return self.C.shape[0]

    @property
    def scale(self):
        return self.mu + self.theta

    @property
    def KA(self):
        return len(self.A) - 1

    @property
    def DA_mean(self):
        """sum_k k (D*A)(k) e = D̂'(1) e + D Â'(1) e."""
        k = np.arange(len(self.D_seq))
        return (k[:, None] * self.D_seq.sum(axis=2)).sum(axis=0) + self.D @ self.A_mean

    # --- censored generator T̃_n(k) -----------------------------------
    def tilde_block(self, n, k):
        M = self.M
        A = self.A
        if k == -1:
            return n * self.mu * A[0]
        if k == 0:
            return n * self.mu * A[1] + self.DA[1] + self.C - n * self.mu * np.eye(M)
        return n * self.mu * A[k + 1] + self.DA[k + 1]

    # --- uniformized reweighted blocks Ă_n(k) ---------------------------
    def breve_block(self, n, k):
        M = self.M
        s = self.scale
        if n == 0:
            if k == -1:
                return np.zeros((M, M))
            if k == 0:
                return np.eye(M) + (self.C + self.DA[1]) / s
            return self.DA[k + 1] / s
        if k == -1:
            return self.mu / s * self.A[0]
        if k == 0:
            return (self.theta * np.eye(M) + self.mu * self.A[1] + (self.C + self.DA[1]) / n) / s
        return (self.mu * self.A[k + 1] + self.DA[k + 1] / n) / s

    def limit_block(self, k):
        s = self.scale
        if k == -1:
            return self.mu / s * self.A[0]
        if k == 0:
            return (self.theta * np.eye(self.M) + self.mu * self.A[1]) / s
        return self.mu / s * self.A[k + 1]

    def breve_tail(self, n, k):
        """sum_{l > k} Ă_n(l) for k >= 0, closed with the full totals."""
        s = self.scale
        if n == 0:
            return self.DAbar[k + 1] / s
        return (self.mu * self.Abar[k + 1] + self.DAbar[k + 1] / n) / s

    def block_error_bound(self, n):
        """Entrywise bound (1/n)(|C| + D A)/(mu + theta) on sum_k |Ă_n(k) - Ă(k)|."""
        return (np.abs(self.C) + self.D @ self.A_total) / (n * self.scale)

    def limit_kernel(self):
        """Ă(k), k >= -1, as an M/G/1-type kernel (index shifted by one)."""
        s = self.scale
        a = self.mu / s
        blocks = a * self.A.copy()
        blocks[1] += self.theta / s * np.eye(self.M)
        total = a * self.A_total + self.theta / s * np.eye(self.M)
        mean = a * self.A_mean + self.theta / s * np.ones(self.M)
        rho_b = (self.rho * self.mu + self.theta) / s
        return mg1.Mg1Kernel(blocks, total, mean, rho_b, a * self.noise)


def build_blocks(bmap, kernel, mu):
    """Block accessors for the censored generator and the uniformized chain.

    Raises:
        ValueError: if ``mu <= 0``.
    """
    if not mu > 0:
        raise ValueError("retrial rate mu must be positive")
    A = np.ascontiguousarray(kernel.A_seq.entries)
    KA = len(A) - 1
    D_entries = np.ascontiguousarray(bmap.D_seq.entries)
    DA = _kernels.kernel("conv")(D_entries, A, KA)
    Abar = kernel.A[None] - np.cumsum(A, axis=0)
    DAtot = bmap.D @ kernel.A
    DAbar = DAtot[None] - np.cumsum(DA, axis=0)
    return RetrialBlocks(float(mu), bmap.theta, bmap.C, bmap.D, D_entries, A, DA, Abar, DAbar,
                         kernel.A, kernel.mean, kernel.rho, kernel.weight_error)


@dataclass(frozen=True)
class LimitChain:
    G: np.ndarray
    g: np.ndarray
    U0: np.ndarray
    R_seq: MatrixSeq
    R: np.ndarray
    rho: float
    horizon: int
    iterations: int

    def pi_identity(self):
        eye = np.eye(len(self.G))
        return (1 - self.rho) * self.g @ np.linalg.inv(eye - self.U0) @ np.linalg.inv(eye - self.R)


def solve_limit_chain(blocks, tol=1e-14, K=None):
    """G, U(0), R(k) of the level-independent limit chain."""
    kb = blocks.limit_kernel()
    if kb.rho >= 1:
        raise ValueError("unstable system")
    G, it = mg1.solve_G(kb, tol)
    U0, R_seq, R_total, horizon = mg1.compute_U0_R(kb, G, K)
    return LimitChain(G, mg1.g_vector(G), U0, R_seq, R_total, kb.rho, horizon, it)


@dataclass(frozen=True)
class LevelDependentSolution:
    """G_n, U_n(0), N_n for n = 1..N_star (index 0 unused, N_star+1 = limit)."""

    G_list: np.ndarray
    U_list: np.ndarray
    N_list: np.ndarray
    limit: LimitChain
    rho_breve: float
    xi: float
    B0: np.ndarray
    n_star: int
    closure_gap: float
    max_horizon: int
    mmax: int

    def G(self, n):
        return self.G_list[min(n, self.n_star + 1)]

    def N(self, n):
        if n <= self.n_star:
            return self.N_list[n]
        return np.linalg.inv(np.eye(len(self.limit.G)) - self.limit.U0)


def default_n_star(blocks, K, block_tol=1e-8, cap_factor=10):
    """Smallest n whose block-error bound is below ``block_tol``, capped at cap_factor*K."""
    c = np.abs(np.abs(blocks.C) + blocks.D @ blocks.A_total).sum(axis=1).max() / blocks.scale
    n = int(np.ceil(c / block_tol))
    return max(1, min(n, cap_factor * K)) if cap_factor else max(1, n)


def solve_level_dependent(blocks, limit, n_star, mmax=None, eps=MIX_EPS):
    """Downward sweep n = n_star..1 for G_n, U_n(0), N_n.

    Levels above ``n_star`` take the limit matrix. U_n(0) only involves
    levels above n, so a single sweep from the top is exact given that seed.
    The m-sums over products G_{n+m}...G_{n+1} stop once the product is rank
    one to ``eps`` and the rest is closed with the block tail sums.
    """
    if mmax is None:
        mmax = min(blocks.KA - 2, 4000)
    Glist, Ulist, Nlist, gap, longest = _kernels.kernel("level_sweep")(
        blocks.A, blocks.DA, blocks.Abar, blocks.DAbar, np.ascontiguousarray(blocks.C),
        blocks.mu, blocks.theta, np.ascontiguousarray(limit.G), int(n_star), int(mmax), eps)
    if longest >= mmax and gap > 1e-9:
        raise RuntimeError(f"products of G_n did not become rank one (gap {gap:.2e}); raise the window")
    Am1 = blocks.limit_block(-1)
    xi = float(1.0 - Am1.sum(axis=1).min())
    B0 = Am1 + blocks.limit_block(0)
    return LevelDependentSolution(Glist, Ulist, Nlist, limit, limit.rho, xi, B0, int(n_star),
                                  float(gap), int(longest), int(mmax))


def _products(lds, j, eps=MIX_EPS):
    """P_m = G_{j+m}...G_{j+1}, truncated once rank one."""
    M = lds.G_list.shape[1]
    P = [np.eye(M)]
    for m in range(1, lds.mmax + 1):
        P.append(lds.G(j + m) @ P[-1])
        if np.ptp(P[-1], axis=0).max() < eps:
            break
    return np.array(P)


def _S_T(blocks, P, s):
    """S^(s) = sum_m A(s+m) P_m and the same with D*A, with rank-one closure."""
    m0 = len(P) - 1
    S = np.einsum("mij,mjk->ik", blocks.A[s:s + m0], P[:m0])
    T = np.einsum("mij,mjk->ik", blocks.DA[s:s + m0], P[:m0])
    v = P[m0][0]
    S += np.outer(blocks.Abar[s + m0 - 1].sum(axis=1), v)
    T += np.outer(blocks.DAbar[s + m0 - 1].sum(axis=1), v)
    return S, T


def R_breve(blocks, lds, n, k):
    """R̆_n(k) = sum_m Ă_n(k+m) G_{n+k+m}...G_{n+k+1} N_{n+k}."""
    j = n + k
    P = _products(lds, j)
    S, T = _S_T(blocks, P, k + 1)
    if n == 0:
        return T @ lds.N(j) / blocks.scale
    return (blocks.mu * S + T / n) @ lds.N(j) / blocks.scale


def U_breve(blocks, lds, n):
    """Ŭ_n(0) recomputed from the stored G_n (for checks)."""
    P = _products(lds, n)
    S, T = _S_T(blocks, P, 1)
    M = blocks.M
    return (blocks.theta * np.eye(M) + blocks.C / n + blocks.mu * S + T / n) / blocks.scale


def _nonincreasing(values, atol=1e-13):
    return bool(np.all(np.diff(values) <= atol))


def level_limit_profile(blocks, lds, k_values=(1, 3, 10), points=60):
    """Distance of G_n and R̆_n(k) from their limits as n grows.

    ``G_err`` covers every n = 1..n_star. The R̆_n(k) distances cost one
    product chain per n, so they are taken on a log grid of ``points`` levels
    that always includes n_star.

    Returns:
        dict with ``G_err``, ``G_monotone``, ``grid``, ``R_err`` and
        ``R_monotone`` (both keyed by k), and the final values.
    """
    ns = lds.n_star
    G_err = np.abs(lds.G_list[1:ns + 1] - lds.limit.G).sum(axis=2).max(axis=1)
    grid = np.unique(np.concatenate([np.geomspace(1, ns, points).astype(int), [ns]]))
    R_err, R_mono = {}, {}
    for k in k_values:
        Rl = lds.limit.R_seq[k]
        d = np.array([np.abs(R_breve(blocks, lds, n, k) - Rl).sum(axis=1).max() for n in grid])
        R_err[k] = d
        R_mono[k] = _nonincreasing(d)
    return {"G_err": G_err, "G_monotone": _nonincreasing(G_err), "grid": grid,
            "R_err": R_err, "R_monotone": R_mono, "G_final": float(G_err[-1]),
            "R_final": {k: float(v[-1]) for k, v in R_err.items()}}


def level_zero_matrix(blocks, lds):
    """Ψ0 = Ă_0(0) + sum_{k>=1} Ă_0(k) G_k...G_1, the chain watched at level 0."""
    P = _products(lds, 0)
    _, T = _S_T(blocks, P, 1)
    return np.eye(blocks.M) + (blocks.C + T) / blocks.scale


def stationary_q(blocks, lds, K, tol=1e-10):
    """q(0) from Ψ0, then q(k) = sum_{n<k} q(n) R̆_n(k-n), normalised on 0..K.

    Raises:
        ValueError: if Ψ0 is not stochastic within ``tol``.
    """
    if K + 1 + lds.mmax > blocks.KA:
        mmax = blocks.KA - K - 1
    else:
        mmax = lds.mmax
    if mmax < 1:
        raise ValueError("arrival kernel window too short for the requested K")
    psi = level_zero_matrix(blocks, lds)
    if np.abs(psi.sum(axis=1) - 1).max() > tol:
        raise ValueError("level-0 matrix is not stochastic; blocks and limit disagree")
    q0 = stationary_vector(psi - np.eye(blocks.M))
    Glist = lds.G_list
    Nlist = lds.N_list
    if K > lds.n_star:
        raise ValueError("K must not exceed n_star")
    q = _kernels.kernel("q_recursion")(
        q0, blocks.A, blocks.DA, blocks.Abar, blocks.DAbar, Glist, Nlist,
        blocks.mu, blocks.theta, int(K), int(mmax), MIX_EPS)
    total = q.sum()
    return q / total


@dataclass(frozen=True)
class RetrialSolution:
    """Stationary quantities of the retrial queue on k = 0..K.

    Attributes:
        q_seq: reweighted idle-server vectors q(k), normalised with the exact
            mass so that tails beyond K are not lost.
        p0_seq, p1_seq: idle/busy joint probabilities of (orbit size, phase).
        r_seq: state distribution at service starts.
        x_mu_seq: number in system (orbit plus server).
        kappa: p0(k) = kappa q(k) / max(k, 1).
    """

    q_seq: MatrixSeq
    p0_seq: MatrixSeq
    p1_seq: MatrixSeq
    r_seq: MatrixSeq
    x_mu_seq: MatrixSeq
    kappa: float
    rho: float

    def vectors(self, name):
        return getattr(self, name).entries[:, 0, :]


def _rows(x, bound=0.0):
    return MatrixSeq(x[:, None, :], 0, bound)


def recover_p0_p1(q, kernel, bmap, mu, r_tol=1e-8):
    """p0, r, p1 and x^(mu) from q, with the mass each leaves beyond the window.

    The exact normaliser Z = sum_k max(k,1) p0(k) e gives the first moment of
    p0 past K, which yields the tail of r almost exactly and, through the
    equilibrium kernel, the tail of p1. These tails are carried as
    ``tail_mass_bound`` on the returned sequences.

    Args:
        q: (K+1, M) array of q(k) on the window (any positive scaling).

    Raises:
        ValueError: when the mass of r, window plus tail, misses 1 by more
            than 10 * r_tol plus its uncertified part.
    """
    K = len(q) - 1
    rho = kernel.rho
    lam = bmap.lam
    w = np.maximum(np.arange(K + 1), 1).astype(float)
    p0 = q / w[:, None]
    p0 *= (1 - rho) / p0.sum()
    De = bmap.D.sum(axis=1)
    # exact normaliser of q: sum_k max(k,1) p0(k) e = p0(0)e + (lam - p0 D e)/mu
    Z = p0[0].sum() + (lam - p0.sum(axis=0) @ De) / mu
    q_exact = w[:, None] * p0 / Z
    first_moment_tail = max(Z - (w[:, None] * p0).sum(), 0.0)
    p0_tail = first_moment_tail / (K + 1)
    Dseq = bmap.D_seq.entries
    nD = len(Dseq)
    r = np.zeros((K, q.shape[1]))
    for k in range(K):
        acc = (k + 1) * mu * p0[k + 1]
        lo = max(0, k + 1 - (nD - 1))
        for l in range(lo, k + 1):
            acc = acc + p0[l] @ Dseq[k - l + 1]
        r[k] = acc / lam
    # r beyond K-1: retrials from orbit sizes above K, and batches that jump past K
    Dtail_e = De[None] - np.cumsum(Dseq.sum(axis=2), axis=0)
    jump = sum(p0[l] @ Dtail_e[min(K - l, nD - 1)] for l in range(K + 1))
    r_tail = (mu * first_moment_tail + jump) / lam
    r_unknown = p0_tail * De.max() / lam
    r_mass = r.sum() + r_tail
    if abs(r_mass - 1) > 10 * r_tol + r_unknown:
        raise ValueError(f"service-start distribution has mass {r_mass:.10f}, expected 1")
    Ae = np.ascontiguousarray(kernel.Ae_seq.entries[:K])
    p1 = rho * _kernels.kernel("conv")(r[:, None, :], Ae, K - 1)[:, 0, :]
    Ae_full = kernel.Ae_seq.entries
    Ae_tail_e = kernel.Ae.sum(axis=1)[None] - np.cumsum(Ae_full.sum(axis=2), axis=0)
    p1_tail = rho * (sum(r[l] @ Ae_tail_e[K - 1 - l] for l in range(K)) + r_tail + r_unknown)
    x_mu = p0.copy()
    x_mu[1:] += p1
    return RetrialSolution(_rows(q_exact, max(1 - q_exact.sum(), 0.0)), _rows(p0, p0_tail),
                           _rows(p1, float(p1_tail)), _rows(r, float(r_tail + r_unknown)),
                           _rows(x_mu, float(p0_tail + p1_tail)), float(Z), rho)


def verify_gf_identities(ret, kernel, bmap, mu, z_samples):
    """Residuals of the two generating-function identities linking p0, p1 and Â.

    mu p̂0'(z)(zI - Â(z)) = p̂0(z)(C + z^{-1} D̂(z) Â(z)) and
    p̂1(z)(zI - Â(z)) = p̂0(z)(Â(z) - I).
    """
    p0 = ret.vectors("p0_seq")
    p1 = ret.vectors("p1_seq")
    M = bmap.M
    eye = np.eye(M)
    k0 = np.arange(len(p0))
    k1 = np.arange(len(p1))
    out = {}
    for z in z_samples:
        Ahat = kernel.A_hat(z)
        Dhat = bmap.D_hat(z)
        P0 = z ** k0 @ p0
        dP0 = (k0[1:] * z ** (k0[1:] - 1)) @ p0[1:]
        P1 = z ** k1 @ p1
        r1 = mu * dP0 @ (z * eye - Ahat) - P0 @ (bmap.C + Dhat @ Ahat / z)
        r2 = P1 @ (z * eye - Ahat) - P0 @ (Ahat - eye)
        out[float(z)] = (float(np.abs(r1).max()), float(np.abs(r2).max()))
    return out


def truncated_oracle_q(blocks, L):
    """q from a direct solve of the uniformized chain cut at level L.

    Jumps above L are redirected to level L. Returns (L+1, M) array.
    """
    M = blocks.M
    if L + 1 > blocks.KA:
        raise ValueError("arrival kernel window too short for the oracle level")
    n_st = (L + 1) * M
    P = np.zeros((n_st, n_st))
    for n in range(L + 1):
        r = slice(n * M, (n + 1) * M)
        if n >= 1:
            P[r, (n - 1) * M:n * M] = blocks.breve_block(n, -1)
        for k in range(0, L - n):
            c = n + k
            P[r, c * M:(c + 1) * M] = blocks.breve_block(n, k)
        # everything at or above level L lumped into L
        last = L - n
        P[r, L * M:(L + 1) * M] += blocks.breve_block(n, last) + blocks.breve_tail(n, last)
    Q = P.T - np.eye(n_st)
    Q[-1, :] = 1.0
    b = np.zeros(n_st)
    b[-1] = 1.0
    x = np.linalg.solve(Q, b)
    return x.reshape(L + 1, M)


def solve(bmap, kernel, mu, K, n_star=None, tol=1e-14):
    """Blocks, limit chain, level-dependent sweep, q and (p0, p1, x^(mu))."""
    blocks = build_blocks(bmap, kernel, mu)
    limit = solve_limit_chain(blocks, tol)
    if n_star is None:
        n_star = default_n_star(blocks, K)
    n_star = max(n_star, K)
    lds = solve_level_dependent(blocks, limit, n_star)
    q = stationary_q(blocks, lds, K)
    ret = recover_p0_p1(q, kernel, bmap, mu)
    return blocks, lds, ret
