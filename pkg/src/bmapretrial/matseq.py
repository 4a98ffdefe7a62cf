"""Truncated sequences of square matrices and their convolution algebra."""
from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class MatrixSeq:
    """Matrices M(k) for k = k_min .. k_min + len(entries) - 1.

    Row-vector sequences are stored with shape (n, 1, M).

    Attributes:
        entries: array of shape (n, M, M) or (n, 1, M).
        k_min: index of ``entries[0]``.
        tail_mass_bound: bound on the row-sum mass discarded beyond the last
            stored index, or ``None`` when it cannot be certified.
        signed: if True, entries may be negative.
    """

    entries: np.ndarray
    k_min: int = 0
    tail_mass_bound: float | None = 0.0
    signed: bool = False

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim == 1:
            e = e[:, None, None]
        if e.ndim != 3 or e.shape[1] not in (1, e.shape[2]):
            raise ValueError("entries must have shape (n, M, M) or (n, 1, M)")
        if not self.signed and e.size and e.min() < -1e-13:
            raise ValueError("negative entry in a nonnegative sequence")
        if self.tail_mass_bound is not None and self.tail_mass_bound < 0:
            raise ValueError("tail_mass_bound must be nonnegative")
        object.__setattr__(self, "entries", e)

    @property
    def dim(self):
        return self.entries.shape[2]

    @property
    def rows(self):
        return self.entries.shape[1]

    @property
    def k_max(self):
        return self.k_min + len(self.entries) - 1

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, k):
        """M(k), zero outside the stored window."""
        i = k - self.k_min
        if 0 <= i < len(self.entries):
            return self.entries[i]
        return np.zeros(self.entries.shape[1:])

    def indices(self):
        return np.arange(self.k_min, self.k_max + 1)

    def total(self):
        """Sum of the stored matrices."""
        return self.entries.sum(axis=0)


def from_function(f, K, k_min=0, tail_mass_bound=0.0, signed=False):
    """Build a sequence by evaluating ``f(k)`` (scalar or matrix) on the window."""
    ks = range(k_min, K + 1)
    vals = [np.atleast_2d(np.asarray(f(k), dtype=float)) for k in ks]
    return MatrixSeq(np.array(vals), k_min, tail_mass_bound, signed)


def tail(seq):
    """Single tail M̄(k) = sum_{l>k} M(l) over the stored window.

    The discarded mass bound is added to every index, so the returned values
    are upper bounds on the true tails when the input is nonnegative.
    """
    if len(seq) == 0:
        raise ValueError("empty sequence")
    e = seq.entries
    suffix = np.cumsum(e[::-1], axis=0)[::-1]
    out = np.zeros_like(e)
    out[:-1] = suffix[1:]
    bound = seq.tail_mass_bound
    if bound:
        out = out + bound / seq.dim * np.ones_like(out)
    return MatrixSeq(out, seq.k_min, bound, seq.signed)


def convolve(a, b, K=None):
    """(a*b)(k) = sum_l a(k-l) b(l) by direct summation.

    Args:
        a, b: sequences of the same matrix dimension.
        K: last index to keep; defaults to the joint window.

    Returns:
        MatrixSeq starting at ``a.k_min + b.k_min``.
    """
    if a.dim != b.dim:
        raise ValueError("incompatible matrix dimensions")
    k0 = a.k_min + b.k_min
    kmax = a.k_max + b.k_max if K is None else K
    n = kmax - k0
    c = _kernels.kernel("conv")(a.entries, b.entries, n)
    bound = None
    if a.tail_mass_bound is not None and b.tail_mass_bound is not None:
        na = np.abs(a.total()).sum(axis=1).max()
        nb = np.abs(b.total()).sum(axis=1).max()
        bound = na * b.tail_mass_bound + a.tail_mass_bound * nb + a.tail_mass_bound * b.tail_mass_bound
    return MatrixSeq(c, k0, bound, a.signed or b.signed)


def _neumann_coefficients(entries, K):
    """S(k) for k = 0..K with S(z) = (I - M(z))^{-1}.

    I - M(z) = (I - R(z))(I - M(0)) with R(l) = M(l)(I - M(0))^{-1} for l >= 1,
    so S = (I - M(0))^{-1} (I - R(z))^{-1}, a left Neumann recursion.
    """
    Mdim = entries.shape[1]
    e = np.zeros((K + 1, Mdim, Mdim))
    n = min(len(entries), K + 1)
    e[:n] = entries[:n]
    inv0 = np.linalg.inv(np.eye(Mdim) - e[0])
    R = np.matmul(e, inv0)
    R[0] = 0.0
    return _kernels.kernel("neumann")(inv0, np.ascontiguousarray(R), K)


def conv_power_tail_sum(m_seq, weight, k, total=None):
    """Tail at ``k`` of sum_{n>=1} weight^n M^{*n}.

    The coefficients through ``k`` come from the Neumann recursion on the
    window; the tail is the full sum (I - wM)^{-1} - I minus them.

    Args:
        total: the full sum of M(k) over all k, when the window misses some
            mass; defaults to the window sum.
    """
    if m_seq.k_min != 0:
        raise ValueError("one-sided sequence required")
    wM = weight * m_seq.entries
    Mdim = m_seq.dim
    eye = np.eye(Mdim)
    tot = weight * (m_seq.total() if total is None else np.asarray(total, dtype=float))
    if np.max(np.abs(np.linalg.eigvals(tot))) >= 1.0:
        raise ValueError("divergent Neumann series")
    full = np.linalg.inv(eye - tot)
    if k < 0:
        return full - eye
    S = _neumann_coefficients(wM, k)
    # sum_{n>=1} (wM)^{*n} = S - delta_0 I, so the identity cancels in the tail
    return full - S.sum(axis=0)


def neumann_series(m_seq, K):
    """Coefficients of sum_{n>=0} M^{*n} for k = 0..K."""
    return MatrixSeq(_neumann_coefficients(m_seq.entries, K), 0, None)


def geometric_decay_fit(seq, rel_floor=0.0):
    """Least-squares fit of log max|M(k)| against k.

    Args:
        seq: the sequence to fit.
        rel_floor: entries whose norm is below ``rel_floor`` times the
            largest norm are treated as roundoff and left out.

    Returns:
        (rate, quality) with rate = exp(slope) and quality the R^2 of the fit.
    """
    norms = np.abs(seq.entries).max(axis=(1, 2))
    if not np.any(norms > 0):
        raise ValueError("all-zero sequence")
    keep = norms > max(rel_floor * norms.max(), 0.0)
    if keep.sum() < 5:
        raise ValueError("fewer than 5 nonzero indices")
    x = seq.indices()[keep].astype(float)
    y = np.log(norms[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    quality = 1.0 if ss_tot == 0 else 1.0 - np.sum(resid ** 2) / ss_tot
    return float(np.exp(slope)), float(quality)


def neumann_tail_bound(m_total, m_tilde):
    """Limit bound (I - M)^{-1} M~ (I - M)^{-1} for the tail of sum M^{*n}."""
    inv = np.linalg.inv(np.eye(len(m_total)) - m_total)
    return inv @ m_tilde @ inv


def product_tail_bound(m_total, m_tilde, n_total, n_tilde):
    """Limit bound M~ N + M N~ for the tail of M * N."""
    return m_tilde @ n_total + m_total @ n_tilde
