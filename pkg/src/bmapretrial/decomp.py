"""The factor sequences X1, X2 and their product X linking x(k) to the retrial queue."""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .matseq import MatrixSeq, geometric_decay_fit
from .mg1 import _as_blocks, mixing_horizon

NEGATIVE_DEPTH = 60


@dataclass(frozen=True)
class DecompResult:
    X1_seq: MatrixSeq
    X2_seq: MatrixSeq
    X_seq: MatrixSeq
    gamma: float
    quality: float
    exact_zero: bool


def compute_X2(sol, kernel, K=None):
    """X2(k): coefficients of (1-rho)(I-U(0))^{-1}(I-R̂(z))^{-1}Â(z)."""
    kb = _as_blocks(kernel)
    M = sol.M
    if K is None:
        K = sol.R_seq.k_max
    Y0 = (1 - sol.rho) * np.linalg.inv(np.eye(M) - sol.U0)
    R = np.zeros((K + 1, M, M))
    n = min(K, sol.R_seq.k_max)
    R[1:n + 1] = sol.R_seq.entries[1:n + 1]
    Y = _kernels.kernel("neumann")(Y0, R, K)
    X2 = _kernels.kernel("conv")(Y, np.ascontiguousarray(kb.blocks[:K + 1]), K)
    return MatrixSeq(X2, 0, sol.x_seq.tail_mass_bound)


def compute_X1(G, H):
    """X1(0) = I, X1(m) = G^m - G^{m-1} for m = 1..H."""
    M = len(G)
    P = np.empty((H + 1, M, M))
    P[0] = np.eye(M)
    for m in range(1, H + 1):
        P[m] = P[m - 1] @ G
    X1 = P.copy()
    X1[1:] = P[1:] - P[:-1]
    return MatrixSeq(X1, 0, None, signed=True)


def compute_X(sol, X2_seq, K=None, depth=NEGATIVE_DEPTH, eps=1e-12):
    """X(k) = sum_{m >= max(-k,0)} X1(m) X2(k+m) for k = -depth..K.

    The m-sum stops at the mixing horizon of G, where the telescoping terms
    G^m - G^{m-1} have vanished to ``eps``.
    """
    G = sol.G
    H = max(mixing_horizon(G, eps), depth) + 1
    X1 = compute_X1(G, H).entries
    X2 = X2_seq.entries
    K2 = X2_seq.k_max
    if K is None:
        K = K2 - H
    K = min(K, K2 - H)
    M = sol.M
    n = K + depth + 1
    X = np.zeros((n, M, M))
    # row r of X holds index k = r - depth
    for m in range(H + 1):
        kmin = max(-m, -depth)
        lo = kmin + depth
        X[lo:] += np.matmul(X1[m], X2[kmin + m:K + m + 1])
    return MatrixSeq(X, -depth, None, signed=True)


def xbar_from_X2(sol, X2_seq, K, eps=1e-12):
    """X̄(k) = sum_m G^m X2(k+m+1) for k = 0..K."""
    G = sol.G
    H = mixing_horizon(G, eps) + 1
    M = sol.M
    X2 = X2_seq.entries
    K = min(K, X2_seq.k_max - H - 1)
    out = np.zeros((K + 1, M, M))
    P = np.eye(M)
    for m in range(H + 1):
        out += np.matmul(P, X2[m + 1:K + m + 2])
        P = P @ G
    # sum over m > H of G^m X2(k+m+1) is e g times the remaining tail of X2
    tail = np.cumsum(X2[::-1], axis=0)[::-1]
    eg = np.outer(np.ones(M), sol.g)
    idx = np.arange(K + 1) + H + 2
    extra = np.where((idx < len(X2))[:, None, None], tail[np.minimum(idx, len(X2) - 1)], 0.0)
    out += np.matmul(eg, extra)
    return MatrixSeq(out, 0, None)


def verify_decomposition(p0_seq, X_seq, x_mu_seq, rho, min_reliable=10):
    """Residuals of x^(mu)(k) - (1-rho)^{-1} (p0 * X)(k) on the reliable window.

    Returns:
        dict with ``max`` and per-k ``residuals`` (array over k = 0..Kr).

    Raises:
        ValueError: when fewer than ``min_reliable`` indices are reliable.
    """
    p0 = p0_seq.entries[:, 0, :]
    xm = x_mu_seq.entries[:, 0, :]
    depth = -X_seq.k_min
    Kr = min(len(p0) - 1 - depth, X_seq.k_max, len(xm) - 1)
    if Kr + 1 < min_reliable:
        raise ValueError("window too small for a reliable decomposition check")
    X = X_seq.entries
    res = np.zeros(Kr + 1)
    for k in range(Kr + 1):
        # l runs over p0 indices with k - l >= -depth
        l = np.arange(0, k + depth + 1)
        conv = np.einsum("lp,lpq->q", p0[l], X[k - l + depth])
        res[k] = np.abs(xm[k] - conv / (1 - rho)).max()
    return {"max": float(res.max()), "residuals": res}


def negative_index_decay(X_seq, rel_floor=1e-11):
    """Fit |X(-k)| ~ gamma^k over the stored negative indices.

    Returns:
        (gamma, quality, exact_zero); exact_zero is True when every negative
        index vanishes (as for M = 1), with gamma = 0.
    """
    depth = -X_seq.k_min
    neg = X_seq.entries[:depth][::-1]  # X(-1), X(-2), ...
    scale = np.abs(X_seq.entries).max()
    if depth == 0 or np.abs(neg).max() <= 1e-14 * max(scale, 1.0):
        return 0.0, 1.0, True
    seq = MatrixSeq(neg, 1, None, signed=True)
    gamma, quality = geometric_decay_fit(seq, rel_floor=rel_floor)
    if gamma >= 1:
        raise ValueError(f"negative-index part does not decay (rate {gamma:.4f})")
    return gamma, quality, False


def subdominant_modulus(G):
    """Second-largest eigenvalue modulus of G."""
    ev = np.sort(np.abs(np.linalg.eigvals(G)))[::-1]
    return float(ev[1]) if len(ev) > 1 else 0.0


def decompose(sol, kernel, K=None, depth=NEGATIVE_DEPTH):
    """X1, X2, X and the decay fit of the negative part."""
    X2 = compute_X2(sol, kernel)
    X = compute_X(sol, X2, K, depth)
    H = max(mixing_horizon(sol.G), depth) + 1
    X1 = compute_X1(sol.G, H)
    gamma, quality, exact = negative_index_decay(X)
    return DecompResult(X1, X2, X, gamma, quality, exact)
