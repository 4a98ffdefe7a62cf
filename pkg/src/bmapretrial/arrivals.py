"""BMAP models, service-time laws and the arrival-count kernels A(k), A_e(k)."""
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats
from scipy.sparse.csgraph import connected_components

from . import _kernels
from .matseq import MatrixSeq


def stationary_vector(Q):
    """Probability row vector x with x Q = 0 (generator) or x (Q - I) = 0.

    Pass a generator; for a stochastic matrix P call with ``P - I``.
    """
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    A = np.vstack([Q.T, np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x


# ---------------------------------------------------------------------------
# BMAP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BmapModel:
    """Validated batch Markovian arrival process.

    Attributes:
        C: generator part without arrivals.
        D_seq: D(k) stored from k = 0 with D(0) = O.
        D: sum of the D(k).
        pi: stationary vector of C + D.
        lam: mean arrival rate (customers per unit time).
        theta: max |C_ii|, the uniformization rate.
    """

    C: np.ndarray
    D_seq: MatrixSeq
    D: np.ndarray
    pi: np.ndarray
    lam: float
    theta: float

    @property
    def M(self):
        return self.C.shape[0]

    def batch_mean_vector(self):
        """sum_k k D(k) e."""
        k = self.D_seq.indices()
        return np.einsum("k,kij->i", k.astype(float), self.D_seq.entries)

    def D_hat(self, z):
        k = self.D_seq.indices()
        return np.einsum("k,kij->ij", z ** k, self.D_seq.entries)


def _as_D_entries(D_list):
    D_list = [np.atleast_2d(np.asarray(d, dtype=float)) for d in D_list]
    M = D_list[0].shape[0]
    return np.array([np.zeros((M, M))] + D_list)


def validate_bmap(C, D_seq, tol=1e-12):
    """Check a BMAP and compute pi, lambda and theta.

    Args:
        C: M x M generator part.
        D_seq: MatrixSeq of D(k) (index 0 must be zero if present) or a plain
            list [D(1), D(2), ...].

    Raises:
        ValueError: "not a conservative generator", "reducible background
            chain" or "degenerate arrival process".
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if not isinstance(D_seq, MatrixSeq):
        D_seq = MatrixSeq(_as_D_entries(D_seq), 0)
    if D_seq.k_min == 1:
        D_seq = MatrixSeq(np.concatenate([np.zeros((1,) + C.shape), D_seq.entries]), 0,
                          D_seq.tail_mass_bound)
    M = C.shape[0]
    if C.shape != (M, M) or D_seq.dim != M:
        raise ValueError("dimension mismatch between C and D(k)")
    if np.any(np.abs(D_seq[0]) > 0):
        raise ValueError("D(0) must be zero")
    D = D_seq.total()
    off = C - np.diag(np.diag(C))
    if np.any(np.diag(C) >= 0) or np.any(off < 0) or np.any(D < 0):
        raise ValueError("not a conservative generator")
    if np.max(np.abs((C + D).sum(axis=1))) > tol * max(1.0, np.abs(C).max()):
        raise ValueError("not a conservative generator")
    pattern = (off + D - np.diag(np.diag(D))) > 0
    ncomp, _ = connected_components(pattern, directed=True, connection="strong")
    if ncomp > 1:
        raise ValueError("reducible background chain")
    pi = stationary_vector(C + D)
    k = D_seq.indices().astype(float)
    lam = float(pi @ np.einsum("k,kij->i", k, D_seq.entries))
    if lam <= 0:
        raise ValueError("degenerate arrival process")
    theta = float(np.max(-np.diag(C)))
    return BmapModel(C, D_seq, D, pi, lam, theta)


def batch_pmf(kind, K, **params):
    """Batch-size pmf on 1..K (renormalised) for a base-matrix BMAP.

    kind "geometric" uses P(k) = (1-p) p^{k-1}; "pareto" uses P(k) ∝ k^{-alpha}.
    """
    k = np.arange(1, K + 1, dtype=float)
    if kind == "geometric":
        p = params["p"]
        w = (1 - p) * p ** (k - 1)
    elif kind == "pareto":
        w = k ** (-params["alpha"])
    else:
        raise ValueError(f"unknown batch law {kind!r}")
    return w / w.sum()


def bmap_from_base(C, D_base, pmf):
    """BMAP with D(k) = pmf[k-1] * D_base."""
    D_base = np.atleast_2d(np.asarray(D_base, dtype=float))
    return validate_bmap(C, [p * D_base for p in pmf])


# ---------------------------------------------------------------------------
# service-time laws
# ---------------------------------------------------------------------------

SERVICE_KINDS = ("exponential", "erlang", "deterministic", "pareto", "weibull",
                 "lognormal", "empirical-discrete")


def _upper_gamma_log(s, a):
    """log of the upper incomplete gamma function Γ(s, a), s real, a > 0."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    pos = s > 0
    out[pos] = np.log(special.gammaincc(s[pos], a)) + special.gammaln(s[pos])
    for i in np.flatnonzero(~pos):
        # step up to a positive shape, then recur down: Γ(s) = (Γ(s+1) - a^s e^{-a}) / s
        si = float(s.flat[i])
        n = int(np.floor(-si)) + 1
        val = special.gammaincc(si + n, a) * special.gamma(si + n)
        for j in range(n - 1, -1, -1):
            sj = si + j
            val = (val - a ** sj * np.exp(-a)) / sj
        out.flat[i] = np.log(val)
    return out


@dataclass(frozen=True)
class ServiceModel:
    """Service-time law H with mean h.

    Parameters per kind:
        exponential: rate. erlang: k, rate. deterministic: value.
        pareto: beta, xm. weibull: shape, scale. lognormal: mu, sigma.
        empirical-discrete: values, probs.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SERVICE_KINDS:
            raise ValueError(f"unknown service kind {self.kind!r}")
        if self.kind == "pareto" and self.params["beta"] <= 1:
            raise ValueError("pareto service needs beta > 1 for a finite mean")
        if not 0 < self.mean < np.inf:
            raise ValueError("service mean must be finite and positive")

    # --- moments --------------------------------------------------------
    @property
    def mean(self):
        p = self.params
        k = self.kind
        if k == "exponential":
            return 1.0 / p["rate"]
        if k == "erlang":
            return p["k"] / p["rate"]
        if k == "deterministic":
            return float(p["value"])
        if k == "pareto":
            return p["beta"] * p["xm"] / (p["beta"] - 1)
        if k == "weibull":
            return p["scale"] * special.gamma(1 + 1 / p["shape"])
        if k == "lognormal":
            return float(np.exp(p["mu"] + p["sigma"] ** 2 / 2))
        v, w = self._empirical()
        return float(v @ w)

    def second_moment(self):
        p = self.params
        k = self.kind
        if k == "exponential":
            return 2.0 / p["rate"] ** 2
        if k == "erlang":
            return p["k"] * (p["k"] + 1) / p["rate"] ** 2
        if k == "deterministic":
            return float(p["value"]) ** 2
        if k == "pareto":
            b = p["beta"]
            return np.inf if b <= 2 else b * p["xm"] ** 2 / (b - 2)
        if k == "weibull":
            return p["scale"] ** 2 * special.gamma(1 + 2 / p["shape"])
        if k == "lognormal":
            return float(np.exp(2 * p["mu"] + 2 * p["sigma"] ** 2))
        v, w = self._empirical()
        return float(v ** 2 @ w)

    def _empirical(self):
        v = np.asarray(self.params["values"], dtype=float)
        w = np.asarray(self.params["probs"], dtype=float)
        return v, w / w.sum()

    # --- tails ----------------------------------------------------------
    def tail(self, x):
        """H̄(x) = P(T > x)."""
        x = np.asarray(x, dtype=float)
        p = self.params
        k = self.kind
        if k == "exponential":
            return np.exp(-p["rate"] * np.maximum(x, 0))
        if k == "erlang":
            return special.gammaincc(p["k"], p["rate"] * np.maximum(x, 0))
        if k == "deterministic":
            return (x < p["value"]).astype(float)
        if k == "pareto":
            return np.where(x < p["xm"], 1.0, (p["xm"] / np.maximum(x, p["xm"])) ** p["beta"])
        if k == "weibull":
            return np.exp(-(np.maximum(x, 0) / p["scale"]) ** p["shape"])
        if k == "lognormal":
            with np.errstate(divide="ignore"):
                z = (np.log(np.maximum(x, 0)) - p["mu"]) / p["sigma"]
            return stats.norm.sf(z)
        v, w = self._empirical()
        return (w[None, :] * (v[None, :] > np.atleast_1d(x)[:, None])).sum(axis=1).reshape(x.shape)

    def integrated_tail(self, x):
        """∫_x^∞ H̄(y) dy in closed form."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        p = self.params
        k = self.kind
        if k == "exponential":
            return np.exp(-p["rate"] * x) / p["rate"]
        if k == "erlang":
            # E[(T - x)^+] for a gamma law
            r, n = p["rate"], p["k"]
            return n / r * special.gammaincc(n + 1, r * x) - x * special.gammaincc(n, r * x)
        if k == "deterministic":
            return np.maximum(p["value"] - x, 0.0)
        if k == "pareto":
            b, xm = p["beta"], p["xm"]
            above = xm ** b * np.maximum(x, xm) ** (1 - b) / (b - 1)
            return np.where(x < xm, xm - x + xm / (b - 1), above)
        if k == "weibull":
            c, s = p["shape"], p["scale"]
            return s / c * special.gamma(1 / c) * special.gammaincc(1 / c, (x / s) ** c)
        if k == "lognormal":
            m, sg = p["mu"], p["sigma"]
            with np.errstate(divide="ignore"):
                lx = np.log(x)
            d1 = (m + sg ** 2 - lx) / sg
            d2 = (m - lx) / sg
            return np.exp(m + sg ** 2 / 2) * stats.norm.cdf(d1) - x * stats.norm.cdf(d2)
        v, w = self._empirical()
        return (w[None, :] * np.maximum(v[None, :] - np.atleast_1d(x)[:, None], 0)).sum(axis=1).reshape(x.shape)

    def eq_tail(self, x):
        """P(T_e > x) for the equilibrium (residual) law with density H̄/h."""
        return self.integrated_tail(x) / self.mean

    # --- sampling -------------------------------------------------------
    def sample(self, rng, n):
        p = self.params
        k = self.kind
        if k == "exponential":
            return rng.exponential(1.0 / p["rate"], n)
        if k == "erlang":
            return rng.gamma(p["k"], 1.0 / p["rate"], n)
        if k == "deterministic":
            return np.full(n, float(p["value"]))
        if k == "pareto":
            u = rng.random(n)
            # inverse CDF on the survival scale keeps the far tail exact
            return p["xm"] * np.exp(-np.log1p(-u) / p["beta"])
        if k == "weibull":
            u = rng.random(n)
            return p["scale"] * (-np.log1p(-u)) ** (1 / p["shape"])
        if k == "lognormal":
            return rng.lognormal(p["mu"], p["sigma"], n)
        v, w = self._empirical()
        return rng.choice(v, size=n, p=w)


# ---------------------------------------------------------------------------
# mixed-Poisson weights
# ---------------------------------------------------------------------------


def _poisson_mix_quad(density, theta, m, lo, hi):
    def f(x):
        return density(x) * stats.poisson.pmf(m, theta * x)

    val, err = integrate.quad_vec(f, lo, hi, epsabs=1e-15, epsrel=1e-12, limit=400)
    return val, err


def _weights_block(service, theta, mode, m):
    """gamma_m for an array of m (closed forms where available)."""
    p = service.params
    k = service.kind
    h = service.mean
    mf = m.astype(float)
    if k == "exponential":
        r = p["rate"]
        # exponential is its own equilibrium law
        return r / (r + theta) * (theta / (r + theta)) ** mf
    if k == "erlang":
        r, n = p["rate"], int(p["k"])
        if mode == "service":
            return stats.nbinom.pmf(m, n, r / (r + theta))
        return np.mean([stats.nbinom.pmf(m, i + 1, r / (r + theta)) for i in range(n)], axis=0)
    if k == "deterministic":
        a = theta * p["value"]
        if mode == "service":
            return stats.poisson.pmf(m, a)
        return special.gammainc(mf + 1, a) / a
    if k == "pareto":
        b, xm = p["beta"], p["xm"]
        a = theta * xm
        if mode == "service":
            return b * a ** b * np.exp(_upper_gamma_log(mf - b, a) - special.gammaln(mf + 1))
        first = special.gammainc(mf + 1, a)
        second = a ** b * np.exp(_upper_gamma_log(mf + 1 - b, a) - special.gammaln(mf + 1))
        return (first + second) / (h * theta)
    if k == "empirical-discrete":
        v, w = service._empirical()
        if mode == "service":
            return (w[None, :] * stats.poisson.pmf(m[:, None], theta * v[None, :])).sum(axis=1)
        return (w[None, :] * special.gammainc(mf[:, None] + 1, theta * v[None, :]) / (theta * h)).sum(axis=1)
    # weibull / lognormal: adaptive quadrature, split at the scale parameter
    if mode == "service":
        if k == "weibull":
            density = lambda x: stats.weibull_min.pdf(x, p["shape"], scale=p["scale"])
            split = p["scale"]
        else:
            density = lambda x: stats.lognorm.pdf(x, p["sigma"], scale=np.exp(p["mu"]))
            split = np.exp(p["mu"])
    else:
        density = lambda x: service.tail(x) / h
        split = service.params.get("scale", np.exp(p.get("mu", 0.0)))
    v1, _ = _poisson_mix_quad(density, theta, m, 0.0, split)
    v2, _ = _poisson_mix_quad(density, theta, m, split, np.inf)
    return v1 + v2


def mixed_poisson_weights(service, theta, mode="service", tol=1e-12, m_max=200000, block=2048):
    """Weights gamma_m = ∫ e^{-θx}(θx)^m/m! dH(x) (or dH_e).

    Returns:
        (weights, remainder) where remainder = 1 - sum(weights). Weights stop
        at the first m with remainder < tol, or at ``m_max``.

    Raises:
        ValueError: if a quadrature-based law cannot reach ``tol``.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    if mode not in ("service", "equilibrium"):
        raise ValueError("mode must be 'service' or 'equilibrium'")
    out = []
    total = 0.0
    start = 0
    while start < m_max:
        m = np.arange(start, min(start + block, m_max))
        w = np.clip(_weights_block(service, theta, mode, m), 0.0, None)
        csum = total + np.cumsum(w)
        hit = np.flatnonzero(1.0 - csum < tol)
        if hit.size:
            out.append(w[:hit[0] + 1])
            total = csum[hit[0]]
            break
        out.append(w)
        total = csum[-1]
        start += block
    weights = np.concatenate(out)
    remainder = max(1.0 - total, 0.0)
    if remainder > tol and service.kind in ("weibull", "lognormal") and len(weights) < m_max:
        raise ValueError(f"quadrature could not certify tol; achieved remainder {remainder:.3e}")
    return weights, remainder


# ---------------------------------------------------------------------------
# A(k) kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArrivalKernel:
    """Arrival counts during a service (A) and a residual service (A_e).

    Attributes:
        A_seq, Ae_seq: the kernels on k = 0..K.
        A, Ae: full sums over all k (not just the window).
        mean: vector sum_k k A(k) e.
        rho: traffic intensity lambda * h.
        gamma_weights, gamma_e_weights: mixed-Poisson weights used.
        weight_error: certified bound on the truncation error of the m-sums.
    """

    A_seq: MatrixSeq
    Ae_seq: MatrixSeq
    A: np.ndarray
    Ae: np.ndarray
    mean: np.ndarray
    rho: float
    lam: float
    h: float
    gamma_weights: np.ndarray
    gamma_e_weights: np.ndarray
    weight_error: float

    @property
    def K(self):
        return self.A_seq.k_max

    def A_hat(self, z):
        k = self.A_seq.indices()
        return np.einsum("k,kij->ij", z ** k, self.A_seq.entries)

    def Abar(self):
        """Ā(k) = A - sum_{l<=k} A(l) for k = 0..K, using the full sum A."""
        return self.A[None] - np.cumsum(self.A_seq.entries, axis=0)

    def double_tail_e(self):
        """A̿(k) e for k = 0..K, closed with the mean vector."""
        abar_e = self.Abar().sum(axis=2)
        return self.mean[None] - np.cumsum(abar_e, axis=0)


def _uniformized(bmap):
    M = bmap.M
    th = bmap.theta
    U = bmap.D_seq.entries / th
    U = U.copy()
    U[0] = np.eye(M) + bmap.C / th
    return U


def _power_sums(U1, weights, pi, d=None, eps=1e-15, max_terms=100000):
    """sum_m w_m U1^m, and optionally sum_j wbar_j U1^j d, via U1^m -> e pi."""
    M = len(pi)
    epi = np.outer(np.ones(M), pi)
    P = np.eye(M)
    tot = np.zeros((M, M))
    wbar = 1.0 - np.cumsum(weights)
    mean = np.zeros(M)
    for m in range(max_terms):
        diff = P - epi
        if m < len(weights):
            tot += weights[m] * diff
        if d is not None:
            wb = wbar[m] if m < len(wbar) else 0.0
            mean += wb * (diff @ d)
        if np.abs(diff).max() < eps and m >= 1:
            break
        P = P @ U1
    return tot + epi, mean


def compute_A_sequence(bmap, service, mode="service", K=200, tol=1e-12, max_tail=None):
    """A(k) = sum_m gamma_m [U^m](k) with U(z) = I + (C + D̂(z))/θ.

    Returns:
        (MatrixSeq of A(k) on 0..K, full sum, weights, certified m-sum error).
        The MatrixSeq tail_mass_bound is the largest row-sum deficit of the
        window, which includes the genuine mass beyond K.

    Raises:
        ValueError: if ``max_tail`` is given and the window deficit exceeds it.
    """
    th = bmap.theta
    M = bmap.M
    U = _uniformized(bmap)
    conv = _kernels.kernel("conv")
    # enough weights that U^m has left the window before they run out
    lam_step = max(bmap.lam / th, 1e-12)
    m_cap = int(min(200000, max(1000, 40 * (K + 10) / lam_step)))
    w, remainder = mixed_poisson_weights(service, th, mode, tol, m_max=m_cap)
    wbar = remainder + np.concatenate([np.cumsum(w[::-1])[::-1][1:], [0.0]])
    A = np.zeros((K + 1, M, M))
    P = np.zeros((K + 1, M, M))
    P[0] = np.eye(M)
    err = remainder
    for m in range(len(w)):
        A += w[m] * P
        mass = P.sum(axis=(0, 2)).max()
        err = wbar[m] * mass
        if err < tol:
            break
        if m + 1 < len(w):
            P = conv(P, U, K)
    U1 = U.sum(axis=0)
    total, _ = _power_sums(U1, w, bmap.pi)
    deficit = float(np.max(1.0 - A.sum(axis=(0, 2))))
    if max_tail is not None and deficit > max_tail:
        raise ValueError(f"tail mass {deficit:.3e} beyond K={K} exceeds {max_tail:.1e}; increase K")
    return MatrixSeq(A, 0, max(deficit, 0.0)), total, w, float(err)


def build_kernel(bmap, service, K, tol=1e-12):
    """Both kernels A and A_e on 0..K plus totals, mean vector and rho."""
    A_seq, A_tot, w, err = compute_A_sequence(bmap, service, "service", K, tol)
    Ae_seq, Ae_tot, we, err_e = compute_A_sequence(bmap, service, "equilibrium", K, tol)
    U1 = _uniformized(bmap).sum(axis=0)
    d = bmap.batch_mean_vector() / bmap.theta
    _, mean_dev = _power_sums(U1, w, bmap.pi, d)
    # sum_j wbar_j = sum_m m w_m = theta * h exactly
    mean = mean_dev + bmap.theta * service.mean * float(bmap.pi @ d) * np.ones(bmap.M)
    rho = bmap.lam * service.mean
    return ArrivalKernel(A_seq, Ae_seq, A_tot, Ae_tot, mean, rho, bmap.lam, service.mean,
                         w, we, max(err, err_e))


def rates(kernel, bmap=None, service=None, check_tol=1e-8):
    """(lambda, rho) with the cross-check rho = pi sum_k k A(k) e.

    Raises:
        ValueError: "unstable system" when rho >= 1.
    """
    lam = kernel.lam if bmap is None else bmap.lam
    h = kernel.h if service is None else service.mean
    rho = lam * h
    if rho >= 1:
        raise ValueError("unstable system")
    if bmap is not None:
        rho_k = float(bmap.pi @ kernel.mean)
        if abs(rho_k - rho) > check_tol:
            raise ValueError(f"rho cross-check failed: {rho_k} vs {rho}")
    return lam, rho


def check_stable(bmap, service):
    if bmap.lam * service.mean >= 1:
        raise ValueError("unstable system")
