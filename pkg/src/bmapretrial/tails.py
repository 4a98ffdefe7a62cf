"""Heavy-tail reference laws, asymptotic constants and windowed tail diagnostics.

No finite computation can confirm a k -> infinity limit, so every limit
statement here is rendered as a trajectory over a window of k plus an
explicit pass threshold on its trend.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import _kernels
from .arrivals import mixed_poisson_weights
from .matseq import MatrixSeq
from .retrial import R_breve, _products

DEFAULT_FLOOR = 1e-12
LIGHT_TAILED = ("exponential", "erlang", "deterministic", "empirical-discrete")


def is_subexponential(service):
    """True for the parametric families whose equilibrium law is subexponential."""
    if service.kind in LIGHT_TAILED:
        return False
    if service.kind == "weibull":
        return service.params["shape"] < 1
    return True


def reference_tail(service, lam, k):
    """P(Y > k) for Y = lam * T_e, with T_e the equilibrium service time."""
    return service.eq_tail(np.asarray(k, dtype=float) / lam)


def zeta_from_weights(service, theta):
    """zeta = int x e^{-theta x} dH(x), read off the first mixed-Poisson weight."""
    w, _ = mixed_poisson_weights(service, theta, "service")
    return float(w[1] / theta)


def zeta_quadrature(service, theta):
    """zeta by integrating (1 - theta x) e^{-theta x} against the service tail."""
    def f(x):
        return (1 - theta * x) * np.exp(-theta * x) * service.tail(x)

    split = max(service.mean, 1.0 / theta)
    points = None
    if service.kind == "pareto":
        split = max(split, service.params["xm"])
        points = [service.params["xm"]]
    elif service.kind == "deterministic":
        points = [service.params["value"]]
    elif service.kind == "empirical-discrete":
        points = list(np.asarray(service.params["values"], dtype=float))
        split = max(split, max(points))
    lo, _ = integrate.quad(f, 0, split, points=points, limit=400, epsabs=1e-14, epsrel=1e-12)
    hi, _ = integrate.quad(f, split, np.inf, limit=400, epsabs=1e-14, epsrel=1e-12)
    return float(lo + hi)


def double_tail_D_e(bmap, K):
    """D̿(k) e for k = 0..K, closed with the batch mean vector."""
    D = bmap.D_seq.entries
    De = D.sum(axis=2)
    n = max(K + 1, len(De))
    pad = np.zeros((n, bmap.M))
    pad[:len(De)] = De
    dbar = bmap.D.sum(axis=1)[None] - np.cumsum(pad, axis=0)
    return (bmap.batch_mean_vector()[None] - np.cumsum(dbar, axis=0))[:K + 1]


@dataclass(frozen=True)
class TailModel:
    """Reference law and asymptotic constants of the heavy-tail study.

    Attributes:
        service, lam: define Y = lam * T_e.
        cA: limit of A̿(k)e / P(Y>k) (rho e for the reference law).
        cD: D̿(k)e / P(Y>k) at the end of the window (zero for finite batches).
        zeta: int x e^{-theta x} dH(x).
        mu, theta, D: retrial rate, uniformization rate and total batch matrix.
        g_limit, N_limit: ğ and (I - Ŭ(0))^{-1} of the limit chain.
        CR: (mu/(mu+theta)) cA ğ (I - Ŭ(0))^{-1}.
        CGamma: (D cA + cD) ğ (I - Ŭ(0))^{-1}.
        Gamma_seq: Γ(k) = sum_m (D*A)(k+m+1) Ğ^m (I - Ŭ(0))^{-1}.
        Gamma_bar: Γ̄(k) on the same window.
        c_q: the constant c assembled from q and c_n^A (a diagnostic value).
    """

    service: object
    lam: float
    cA: np.ndarray
    cD: np.ndarray
    zeta: float
    mu: float = None
    theta: float = None
    D: np.ndarray = None
    g_limit: np.ndarray = None
    N_limit: np.ndarray = None
    CR: np.ndarray = None
    CGamma: np.ndarray = None
    Gamma_seq: MatrixSeq = None
    Gamma_bar: np.ndarray = None
    c_q: float = None
    notes: list = field(default_factory=list)

    def P_Y(self, k):
        return reference_tail(self.service, self.lam, k)

    def cA_n(self, n):
        """c_n^A = min(n,1) cA + (cD + D cA) / (max(n,1) mu)."""
        return min(n, 1) * self.cA + (self.cD + self.D @ self.cA) / (max(n, 1) * self.mu)

    def CR_n(self, n):
        """C_n^R = (mu/(mu+theta)) c_n^A ğ (I - Ŭ(0))^{-1}."""
        return self.mu / (self.mu + self.theta) * np.outer(self.cA_n(n), self.g_limit) @ self.N_limit


def empirical_cA(kernel, service, lam, window, floor=DEFAULT_FLOOR):
    """Trajectory of A̿(k)e / P(Y>k) over ``window`` and its last value.

    Returns:
        dict with ``k``, ``ratio`` (len(k), M), ``estimate`` and ``flag``
        ("ok" or "assumption not met").
    """
    ks = np.asarray(window, dtype=int)
    ks = ks[ks <= kernel.K]
    py = reference_tail(service, lam, ks)
    keep = py > floor
    if not keep.all():
        warnings.warn("reference tail underflows; window clipped", RuntimeWarning)
        ks, py = ks[keep], py[keep]
    if len(ks) < 2:
        raise ValueError("empty reliable window")
    ratio = kernel.double_tail_e()[ks] / py[:, None]
    mid = ratio[len(ratio) // 2]
    end = ratio[-1]
    stable = np.all(np.abs(end / np.where(mid > 0, mid, np.inf) - 1) < 0.25) and np.all(end > 0)
    flag = "ok" if stable and is_subexponential(service) else "assumption not met"
    return {"k": ks, "ratio": ratio, "estimate": end, "flag": flag}


def predicted_tails(cA, pi, rho, PY):
    """(pi cA / (1 - rho)) pi P(Y>k) as a row sequence over the given P(Y>k) values."""
    scale = float(np.dot(pi, cA)) / (1 - rho)
    rows = scale * np.outer(np.asarray(PY, dtype=float), pi)
    return MatrixSeq(rows[:, None, :], 0, None)


def tail_vectors(seq_or_array, total=None):
    """Tail vectors (sum_{l>k} of the rows) from a row sequence.

    When ``total`` (the exact full sum, a vector) is given, tails are formed
    as total minus the cumulative sum, so mass beyond the window is kept.
    """
    x = seq_or_array.entries[:, 0, :] if isinstance(seq_or_array, MatrixSeq) else np.asarray(seq_or_array)
    cum = np.cumsum(x, axis=0)
    if total is None:
        total = cum[-1]
    return np.asarray(total)[None] - cum


def reliable_limit(tail_values, bound, rel=0.01):
    """Largest k such that ``bound <= rel * tail(j)`` for every j <= k.

    ``tail_values`` is a 1-d array of scalar tails (row sums); returns -1 when
    even k = 0 fails.
    """
    ok = np.asarray(tail_values) * rel >= bound
    if ok.all():
        return len(ok) - 1
    return int(np.argmin(ok)) - 1


def nested_windows(k_max, fractions=(0.25, 0.5, 1.0)):
    """Last-decade windows [K1/10, K1] for K1 = fraction * k_max."""
    out = []
    for f in fractions:
        hi = int(round(f * k_max))
        out.append((max(1, hi // 10), hi))
    return out


def _geo_mean(r):
    return float(np.exp(np.mean(np.log(r))))


def tail_ratio_report(observed, predicted, k_max=None, floor=DEFAULT_FLOOR, service=None,
                      fractions=(0.25, 0.5, 1.0)):
    """Per-k ratio of row-summed tails plus last-decade summaries on nested windows.

    Args:
        observed, predicted: arrays (n, M) or (n,) of tail values over k = 0..n-1.
        k_max: last reliable k (defaults to the common window).
        floor: values at or below it are left out.
        service: when given and not subexponential, the report is flagged.

    Returns:
        dict with ``ratio`` (per k, NaN where unreliable), ``windows`` (list of
        (lo, hi, geometric mean, spread)), ``monotone`` (distance of the
        geometric mean from 1 shrinks across windows), and ``flag``.

    Raises:
        ValueError: if no k in the window is reliable.
    """
    obs = np.asarray(observed, dtype=float)
    pre = np.asarray(predicted, dtype=float)
    if obs.ndim == 2:
        obs = obs.sum(axis=1)
    if pre.ndim == 2:
        pre = pre.sum(axis=1)
    n = min(len(obs), len(pre))
    if k_max is None:
        k_max = n - 1
    k_max = min(k_max, n - 1)
    ratio = np.full(n, np.nan)
    good = (obs[:n] > floor) & (pre[:n] > floor)
    ratio[good] = obs[:n][good] / pre[:n][good]
    windows = []
    for lo, hi in nested_windows(k_max, fractions):
        r = ratio[lo:hi + 1]
        r = r[np.isfinite(r)]
        if len(r) == 0:
            raise ValueError("empty reliable window")
        windows.append((lo, hi, _geo_mean(r), float(r.max() / r.min())))
    dist = [abs(np.log(w[2])) for w in windows]
    monotone = all(dist[i + 1] <= dist[i] for i in range(len(dist) - 1))
    flag = "ok"
    if service is not None and not is_subexponential(service):
        flag = "no subexponential reference"
    return {"ratio": ratio, "windows": windows, "monotone": bool(monotone),
            "last": windows[-1][2], "flag": flag}


# ---------------------------------------------------------------------------
# constants of the retrial chain
# ---------------------------------------------------------------------------


def gamma_sequence(blocks, limit, K):
    """Γ(k) and Γ̄(k) for k = 0..K from the limit chain.

    Both are backward Horner sums over D*A with rank-one closure past the
    stored window.
    """
    M = blocks.M
    DA = blocks.DA
    KA = len(DA) - 1
    eg = np.outer(np.ones(M), limit.g)
    top = blocks.DAbar[KA] @ eg
    # a deficit within the block error is not mass beyond the window
    if blocks.DAbar[KA].sum(axis=1).max() <= 2 * blocks.noise * blocks.D.sum(axis=1).max():
        top = 0 * top
    B = _kernels.kernel("horner_all")(np.ascontiguousarray(DA[1:]), limit.G, top)
    N = np.linalg.inv(np.eye(M) - limit.U0)
    K = min(K, KA - 1)
    Gamma = B[:K + 1] @ N
    # Γ̄(k) = sum_m D̄A(k+m+1) Ğ^m N, the double tail closes the top
    DAbar = np.ascontiguousarray(blocks.DAbar[1:])
    dd = blocks.DA_mean - blocks.DAbar.sum(axis=2).sum(axis=0)
    Bbar = _kernels.kernel("horner_all")(DAbar, limit.G, np.outer(dd, limit.g))
    Gamma_bar = Bbar[:K + 1] @ N
    return MatrixSeq(Gamma, 0, None), Gamma_bar


def assemble_c(q, tm, rho_breve):
    """c = sum_n q(n) c_n^A (mu/(mu+theta)) / (1 - rho_breve)."""
    s = sum(q[n] @ tm.cA_n(n) for n in range(len(q)))
    return float(s * tm.mu / (tm.mu + tm.theta) / (1 - rho_breve))


def build_tail_model(bmap, service, kernel, blocks=None, lds=None, q=None, cA=None, K_cD=None):
    """TailModel with the reference constants and, if given, the retrial ones.

    Args:
        cA: override for c^A; defaults to rho e (residual-service reference).
        q: (n, M) exactly normalised q vectors for the constant c.
    """
    M = bmap.M
    if cA is None:
        cA = kernel.rho * np.ones(M)
    K_cD = K_cD or kernel.K
    PYK = reference_tail(service, bmap.lam, K_cD)
    cD = double_tail_D_e(bmap, K_cD)[-1] / PYK if PYK > 0 else np.zeros(M)
    zeta = zeta_from_weights(service, bmap.theta)
    notes = []
    if not is_subexponential(service):
        notes.append("no subexponential reference")
    if blocks is None or lds is None:
        return TailModel(service, bmap.lam, cA, cD, zeta, notes=notes)
    lim = lds.limit
    N = np.linalg.inv(np.eye(M) - lim.U0)
    mu, theta = blocks.mu, blocks.theta
    CR = mu / (mu + theta) * np.outer(cA, lim.g) @ N
    CG = np.outer(bmap.D @ cA + cD, lim.g) @ N
    Gamma_seq, Gamma_bar = gamma_sequence(blocks, lim, kernel.K)
    tm = TailModel(service, bmap.lam, cA, cD, zeta, mu, theta, bmap.D, lim.g, N, CR, CG,
                   Gamma_seq, Gamma_bar, None, notes)
    if q is not None:
        object.__setattr__(tm, "c_q", assemble_c(q, tm, lds.rho_breve))
    return tm


# ---------------------------------------------------------------------------
# windowed tail diagnostics
# ---------------------------------------------------------------------------


def R_breve_tail(blocks, lds, n, k, L=None):
    """R̄̆_n(k) = sum_{l>k} R̆_n(l): explicit terms up to L, rank-one closure above.

    Above L every level n+l is treated as level n+L+1, whose products and N
    matrix differ from the true ones by O(1/(n+L)).
    """
    M = blocks.M
    if L is None:
        L = min(blocks.KA - lds.max_horizon - 3, k + 4000)
    out = np.zeros((M, M))
    for l in range(k + 1, L + 1):
        out += R_breve(blocks, lds, n, l)
    j = n + L + 1
    P = _products(lds, j)
    m0 = len(P) - 1
    s = blocks.scale
    Abar_e = blocks.Abar.sum(axis=2)
    DAbar_e = blocks.DAbar.sum(axis=2)
    # tails of Ă_n summed over l > L, products taken at level n+L+1
    wa = blocks.mu if n > 0 else 0.0
    wd = 1.0 / max(n, 1)
    tail_terms = np.zeros((M, M))
    for m in range(m0):
        idx = L + 1 + m
        tail_terms += (wa * blocks.Abar[idx] + wd * blocks.DAbar[idx]) @ P[m]
    # sum over i >= L+1+m0 of the single tails, from the mean vectors
    a_dd = blocks.A_mean - Abar_e[:L + 1 + m0].sum(axis=0)
    d_dd = blocks.DA_mean - DAbar_e[:L + 1 + m0].sum(axis=0)
    tail_terms += np.outer(wa * a_dd + wd * d_dd, P[m0][0])
    out += tail_terms / s @ lds.N(j)
    return out


def tail_diagnostics(bmap, kernel, blocks, lds, ret, tm, k_max, slack=0.25, n_values=(0, 1, 2, 10)):
    """Windowed checks of the tail statements; one pass/fail entry per item.

    Items:
        a: p̄0(k)/P(Y>k) is nonincreasing over the last decade and drops at
           least tenfold across it.
        b: q̄(k)/P(Y>k) stays below a reported bound; its distance to c pi
           is reported on nested windows.
        c: A(k) >= zeta D(k) entrywise.
        d: C^R and C_n^R (n >= 1) have no zero columns.
        e: windowed R̄̆_n(k)/P(Y>k) <= (1+slack) C_n^R and
           Γ̄(k)/P(Y>k) <= (1+slack) C^Γ at the largest k.
    """
    out = {}
    ks = np.arange(k_max + 1)
    PY = tm.P_Y(ks)
    lo = max(1, k_max // 10)
    # (a)
    p0 = ret.vectors("p0_seq")
    p0bar = tail_vectors(p0, total=p0.sum(axis=0))[:k_max + 1].sum(axis=1) + ret.p0_seq.tail_mass_bound
    ra = p0bar / PY
    seg = ra[lo:k_max + 1]
    drop = float(seg[0] / seg[-1])
    nonincr = bool(np.all(np.diff(seg) <= 1e-12 * seg[:-1]))
    out["a"] = {"ratio": ra, "drop": drop, "nonincreasing": nonincr, "pass": nonincr and drop >= 10}
    # (b)
    q = ret.vectors("q_seq")
    qbar = 1.0 - np.cumsum(q.sum(axis=1))
    # mass past the window is spread along pi, the direction the tail approaches
    qbar_vec = q.sum(axis=0)[None] - np.cumsum(q, axis=0)
    qbar_vec += (1.0 - q.sum()) * bmap.pi[None]
    rb = qbar[:k_max + 1] / PY
    bound = float(rb[lo:].max())
    target = tm.c_q * bmap.pi if tm.c_q is not None else None
    dist = []
    if target is not None:
        for a, b in nested_windows(k_max):
            dist.append(float(np.abs(qbar_vec[b] / PY[b] - target).max()))
    out["b"] = {"ratio": rb, "bound": bound, "c": tm.c_q, "distance_to_c_pi": dist,
                "pass": bool(np.isfinite(bound))}
    # (c)
    D = bmap.D_seq.entries
    n = min(len(D), kernel.K + 1)
    A = kernel.A_seq.entries[:n]
    gap = float((A[1:n] - tm.zeta * D[1:n]).min()) if n > 1 else 0.0
    out["c"] = {"zeta": tm.zeta, "min_gap": gap, "pass": gap >= -1e-14}
    # (d)
    cols = {"CR": tm.CR}
    for nn in n_values:
        cols[f"CR_{nn}"] = tm.CR_n(nn)
    colpos = {name: bool(np.all(m.max(axis=0) > 0)) for name, m in cols.items()}
    need = [name for name in colpos if name == "CR" or name != "CR_0"]
    out["d"] = {"matrices": cols, "CGamma": tm.CGamma, "columns_positive": colpos,
                "pass": all(colpos[name] for name in need)}
    # (e)
    ratios = {}
    ok = True
    for nn in n_values:
        Rt = R_breve_tail(blocks, lds, nn, k_max)
        r = Rt / PY[k_max]
        lim = tm.CR_n(nn)
        good = bool(np.all(r <= (1 + slack) * lim + 1e-300))
        ratios[nn] = {"ratio": r, "bound": lim, "pass": good}
        ok = ok and good
    gb = tm.Gamma_bar[min(k_max, len(tm.Gamma_bar) - 1)] / PY[k_max]
    g_ok = bool(np.all(gb <= (1 + slack) * tm.CGamma + 1e-300))
    out["e"] = {"R": ratios, "Gamma_ratio": gb, "Gamma_pass": g_ok, "pass": ok and g_ok}
    return out


def row_sum_bound(blocks, lds, n_values=(1, 2, 10)):
    """Check sum_k R̆_n(k) e <= (mu Â'(1)e + D Â'(1)e + D̂'(1)e) / ((mu+theta)(1-xi)).

    The full sum over k >= 1 is the tail of R̆_n at k = 0.
    """
    bound = (blocks.mu * blocks.A_mean + blocks.DA_mean) / (blocks.scale * (1 - lds.xi))
    sums = {n: R_breve_tail(blocks, lds, n, 0).sum(axis=1) for n in n_values}
    ok = all(bool(np.all(s <= bound * (1 + 1e-12))) for s in sums.values())
    return {"bound": bound, "row_sums": sums, "xi": lds.xi, "pass": ok}


def sandwich_check(blocks, lds, Gamma_seq, n=None, k_values=(1, 2, 3, 5, 10)):
    """(1-eps) R̆(k) <= R̆_n(k) <= (1+eps)(R̆(k) + eps Γ(k)) entrywise at level n.

    eps = ||block error bound at n||_inf / (1 - xi): the blocks differ from
    their limits by at most the first factor, and the taboo sums amplify it
    by at most 1/(1-xi).
    """
    if n is None:
        n = lds.n_star
    eps0 = float(np.abs(blocks.block_error_bound(n)).sum(axis=1).max())
    eps = eps0 / (1 - lds.xi)
    rows = {}
    ok = True
    for k in k_values:
        Rn = R_breve(blocks, lds, n, k)
        Rl = lds.limit.R_seq[k]
        lower = (1 - eps) * Rl
        upper = (1 + eps) * (Rl + eps * Gamma_seq[k])
        good = bool(np.all(Rn >= lower - 1e-15) and np.all(Rn <= upper + 1e-15))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(Rl > 0, (Rn - Rl) / Rl, 0.0)
        rows[k] = {"relative_gap": float(np.abs(rel).max()), "pass": good}
        ok = ok and good
    return {"n": int(n), "eps": eps, "eps_blocks": eps0, "xi": lds.xi, "k": rows, "pass": ok}
