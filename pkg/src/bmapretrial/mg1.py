"""The standard BMAP/GI/1 queue as an M/G/1-type chain: G, U(0), R(k), x(k)."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .arrivals import stationary_vector
from .matseq import MatrixSeq


class Mg1Kernel(NamedTuple):
    """Repeating blocks of an M/G/1-type chain.

    ``blocks[k]`` is the block k - 1 levels up (k = 0 is one level down),
    ``total`` the full sum over all k and ``mean`` the vector sum_k k blocks[k] e.
    ``noise`` bounds the error of the stored blocks; a window deficit below
    it is not treated as mass beyond the window.
    """

    blocks: np.ndarray
    total: np.ndarray
    mean: np.ndarray
    rho: float
    noise: float = 0.0


def kernel_blocks(kernel):
    return Mg1Kernel(kernel.A_seq.entries, kernel.A, kernel.mean, kernel.rho, kernel.weight_error)


@dataclass(frozen=True)
class Mg1Solution:
    G: np.ndarray
    g: np.ndarray
    U0: np.ndarray
    R_seq: MatrixSeq
    R: np.ndarray
    x_seq: MatrixSeq
    rho: float
    iterations: int
    horizon: int

    @property
    def M(self):
        return self.G.shape[0]

    def R_hat(self, z):
        k = self.R_seq.indices()
        return np.einsum("k,kij->ij", z ** k, self.R_seq.entries)

    def pi_identity(self):
        """(1 - rho) g (I - U(0))^{-1} (I - R)^{-1}."""
        eye = np.eye(self.M)
        return (1 - self.rho) * self.g @ np.linalg.inv(eye - self.U0) @ np.linalg.inv(eye - self.R)


def _as_blocks(kernel):
    return kernel if isinstance(kernel, Mg1Kernel) else kernel_blocks(kernel)


def solve_G(kernel, tol=1e-14, max_iter=200000):
    """Minimal nonnegative solution of G = sum_k A(k) G^k.

    Natural iteration from G = O. Blocks beyond the window are closed with
    Ā(K) G^{K+1}, using the full sum of the blocks.

    Returns:
        (G, iterations)

    Raises:
        RuntimeError: when ``max_iter`` is exceeded.
    """
    kb = _as_blocks(kernel)
    A = np.ascontiguousarray(kb.blocks)
    top = kb.total - A.sum(axis=0)
    horner = _kernels.kernel("horner_all")
    M = A.shape[1]
    G = np.zeros((M, M))
    diff = np.inf
    for it in range(1, max_iter + 1):
        Gn = horner(A, G, top)[0]
        diff = np.abs(Gn - G).max()
        G = Gn
        if diff < tol:
            return G, it
    raise RuntimeError(f"G iteration did not converge: last change {diff:.3e}")


def g_vector(G):
    return stationary_vector(G - np.eye(len(G)))


def mixing_horizon(G, eps=1e-12, max_power=100000):
    """Smallest m at which the rows of G^m agree to ``eps``.

    Rows of G^m approach g; comparing rows with each other rather than with g
    keeps the test meaningful when G is stochastic only to roundoff.
    """
    P = np.eye(len(G))
    for m in range(max_power):
        if np.ptp(P, axis=0).max() < eps:
            return m
        P = P @ G
    raise RuntimeError("G powers did not approach e g")


def compute_U0_R(kernel, G, K=None, eps=1e-12):
    """U(0) = sum_m A(m+1) G^m and R(k) = sum_m A(k+m+1) G^m (I - U(0))^{-1}.

    The m-sums run backwards through the stored blocks; mass beyond the
    window is closed with Ā(K) e g. R(k) is kept for k <= K, which defaults
    to the window minus the mixing horizon of G.

    Returns:
        (U0, R_seq, R_total, horizon)
    """
    kb = _as_blocks(kernel)
    A = np.ascontiguousarray(kb.blocks)
    KA = len(A) - 1
    M = A.shape[1]
    g = g_vector(G)
    eg = np.outer(np.ones(M), g)
    horizon = mixing_horizon(G, eps)
    Abar_top = kb.total - A.sum(axis=0)
    top = Abar_top @ eg
    # U(0) collects every block, so it always takes the closure; R(k) only
    # takes it when the deficit is genuine tail mass rather than block error
    genuine = Abar_top.sum(axis=1).max() > 2 * kb.noise
    B = _kernels.kernel("horner_all")(np.ascontiguousarray(A[1:]), G, top if genuine else 0 * top)
    U0 = B[0] if genuine else B[0] + top
    N = np.linalg.inv(np.eye(M) - U0)
    if K is None:
        K = max(1, KA - horizon)
    K = min(K, KA - 1)
    R = np.zeros((K + 1, M, M))
    R[1:] = B[1:K + 1] @ N
    # full sum: sum_m Ā(m+1) G^m, closed with the double tail
    Abar = kb.total[None] - np.cumsum(A, axis=0)
    abar_e = Abar.sum(axis=2)
    dtail_e = kb.mean[None] - np.cumsum(abar_e, axis=0)
    m0 = min(horizon, KA - 2)
    S = np.zeros((M, M))
    P = np.eye(M)
    for m in range(m0):
        S += Abar[m + 1] @ P
        P = P @ G
    # sum_{m >= m0} Ā(m+1) G^m ≈ A̿(m0) e g
    S += np.outer(dtail_e[m0], g)
    R_total = S @ N
    return U0, MatrixSeq(R, 0, float(np.abs(R_total - R.sum(axis=0)).sum(axis=1).max())), R_total, horizon


def stationary_queue_length(kernel, G, U0, R_seq, rho, K=None):
    """x(k) from y(0) = (1-rho) g (I-U(0))^{-1}, y = y * R, x = y * A."""
    kb = _as_blocks(kernel)
    M = G.shape[0]
    g = g_vector(G)
    if K is None:
        K = R_seq.k_max
    y0 = (1 - rho) * g @ np.linalg.inv(np.eye(M) - U0)
    R = np.zeros((K + 1, M, M))
    n = min(K, R_seq.k_max)
    R[1:n + 1] = R_seq.entries[1:n + 1]
    y = _kernels.kernel("neumann")(y0[None, :], R, K)
    x = _kernels.kernel("conv")(y, np.ascontiguousarray(kb.blocks[:K + 1]), K)[:, 0, :]
    mass = x.sum()
    return MatrixSeq(x[:, None, :], 0, abs(1.0 - mass))


def solve(kernel, K=None, tol=1e-14, eps=1e-12, max_iter=200000):
    """Full standard-queue solve: G, g, U(0), R(k), x(k)."""
    kb = _as_blocks(kernel)
    if kb.rho >= 1:
        raise ValueError("unstable system")
    G, it = solve_G(kb, tol, max_iter)
    U0, R_seq, R_total, horizon = compute_U0_R(kb, G, K, eps)
    x_seq = stationary_queue_length(kb, G, U0, R_seq, kb.rho)
    return Mg1Solution(G, g_vector(G), U0, R_seq, R_total, x_seq, kb.rho, it, horizon)


def x_vectors(sol):
    """x(k) as a (K+1, M) array."""
    return sol.x_seq.entries[:, 0, :]


def verify_rg_factorization(sol, kernel, z_samples):
    """Max entrywise residual of zI - Â(z) = (I - R̂(z))(I - U(0))(zI - G) per z."""
    kb = _as_blocks(kernel)
    M = sol.M
    eye = np.eye(M)
    k = np.arange(len(kb.blocks))
    out = {}
    for z in z_samples:
        Ahat = np.einsum("k,kij->ij", z ** k, kb.blocks)
        lhs = z * eye - Ahat
        rhs = (eye - sol.R_hat(z)) @ (eye - sol.U0) @ (z * eye - sol.G)
        out[float(z)] = float(np.abs(lhs - rhs).max())
    return out


def verify_x_forms(sol, kernel, z_samples):
    """Compare x̂(z) from the coefficients with (1-rho) g (z-1)(zI-Â(z))^{-1} Â(z)."""
    kb = _as_blocks(kernel)
    x = x_vectors(sol)
    eye = np.eye(sol.M)
    kA = np.arange(len(kb.blocks))
    kx = np.arange(len(x))
    out = {}
    for z in z_samples:
        Ahat = np.einsum("k,kij->ij", z ** kA, kb.blocks)
        closed = (1 - sol.rho) * (z - 1) * sol.g @ np.linalg.solve((z * eye - Ahat).T, eye).T @ Ahat
        series = z ** kx @ x
        out[float(z)] = float(np.abs(closed - series).max())
    return out
