import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bmapretrial.matseq import (MatrixSeq, conv_power_tail_sum, convolve, from_function,
                                geometric_decay_fit, neumann_series, neumann_tail_bound,
                                product_tail_bound, tail)
from conftest import K_CHECK, ref_tail, subexp_sequence


def scalar(values, k_min=0):
    return MatrixSeq(np.asarray(values, dtype=float)[:, None, None], k_min)


def test_tail_of_geometric():
    k = np.arange(31)
    t = tail(scalar((2 / 3) * (1 / 3) ** k))
    # window tail misses the mass past 30, which is (1/3)^31
    expected = (1 / 3) ** (k + 1) - (1 / 3) ** 31
    assert np.allclose(t.entries[:, 0, 0], expected, atol=1e-12, rtol=0)


def test_tail_with_certified_bound_adds_discarded_mass():
    k = np.arange(31)
    seq = MatrixSeq(((2 / 3) * (1 / 3) ** k)[:, None, None], 0, (1 / 3) ** 31)
    assert np.allclose(tail(seq).entries[:, 0, 0], (1 / 3) ** (k + 1), atol=1e-12, rtol=0)


def test_tail_zero_and_point_mass():
    assert np.all(tail(MatrixSeq(np.zeros((5, 2, 2)))).entries == 0)
    e = np.zeros((6, 2, 2))
    e[0] = np.eye(2)
    assert np.all(tail(MatrixSeq(e)).entries == 0)


def test_tail_empty_raises():
    with pytest.raises(ValueError, match="empty sequence"):
        tail(MatrixSeq(np.zeros((0, 2, 2))))


def test_double_tail_by_repetition():
    k = np.arange(40)
    seq = scalar(0.5 ** (k + 1))
    dd = tail(tail(seq)).entries[:, 0, 0]
    # sum_{l>k} 0.5^{l+1} truncated at 39 = 0.5^{k+1} - 0.5^{40}
    single = 0.5 ** (k + 1) - 0.5 ** 40
    assert np.allclose(dd[:-1], np.cumsum(single[::-1])[::-1][1:], atol=1e-14)


def test_convolve_identity():
    rng = np.random.default_rng(0)
    b = MatrixSeq(rng.random((7, 2, 2)))
    delta = np.zeros((1, 2, 2))
    delta[0] = np.eye(2)
    assert np.allclose(convolve(MatrixSeq(delta), b).entries, b.entries)


def test_convolve_geometric_pair():
    k = np.arange(60)
    a = scalar(0.5 ** (k + 1))
    c = convolve(a, a, 59).entries[:, 0, 0]
    assert np.allclose(c, (k + 1) * 0.5 ** (k + 2), atol=1e-15)


def test_convolve_total_mass(mm1):
    A = mm1[2].A_seq
    c = convolve(A, A)
    assert abs(c.total().sum() - A.total().sum() ** 2) < 1e-10


def test_convolve_dimension_mismatch():
    with pytest.raises(ValueError):
        convolve(MatrixSeq(np.zeros((3, 2, 2))), MatrixSeq(np.zeros((3, 3, 3))))


def test_convolve_tail_bound_is_conservative():
    k = np.arange(20)
    a = MatrixSeq((0.5 ** (k + 1))[:, None, None], 0, 0.5 ** 20)
    c = convolve(a, a)
    assert c.tail_mass_bound >= 1.0 - c.total().sum() - 1e-15


def test_conv_power_tail_sum_examples():
    assert np.all(conv_power_tail_sum(MatrixSeq(np.zeros((5, 2, 2))), 1.0, 0) == 0)
    half = scalar([0.0, 0.5])
    assert abs(conv_power_tail_sum(half, 1.0, 0)[0, 0] - 1.0) < 1e-14
    k = np.arange(1, 80)
    R = scalar(np.concatenate([[0.0], 0.5 * 3.0 ** -k]))
    assert abs(conv_power_tail_sum(R, 1.0, -1)[0, 0] - 1 / 3) < 1e-12


def test_conv_power_tail_sum_divergent():
    with pytest.raises(ValueError, match="divergent Neumann series"):
        conv_power_tail_sum(scalar([0.0, 0.6, 0.5]), 1.0, 3)


def test_neumann_series_matches_repeated_convolution():
    rng = np.random.default_rng(3)
    e = rng.random((6, 2, 2)) * 0.1
    m = MatrixSeq(e)
    S = neumann_series(m, 5).entries
    acc = np.zeros((6, 2, 2))
    acc[0] = np.eye(2)
    power = MatrixSeq(acc.copy())
    for _ in range(200):
        power = convolve(power, m, 5)
        acc += power.entries
    assert np.allclose(S, acc, atol=1e-12)


def test_geometric_decay_fit_examples():
    k = np.arange(30)
    seq = MatrixSeq(0.4 ** k[:, None, None] * np.ones((30, 2, 2)))
    rate, quality = geometric_decay_fit(seq)
    assert abs(rate - 0.4) < 1e-6 and quality >= 0.999
    rate, _ = geometric_decay_fit(MatrixSeq(np.ones((10, 2, 2))))
    assert rate == pytest.approx(1.0)
    with pytest.raises(ValueError):
        geometric_decay_fit(MatrixSeq(np.zeros((10, 2, 2))))


def test_from_function_and_accessors():
    s = from_function(lambda k: 0.5 ** k, 5, k_min=-2, signed=True)
    assert s.k_max == 5 and len(s) == 8
    assert s[-2][0, 0] == 4.0 and s[9].shape == (1, 1) and s[9][0, 0] == 0.0


def test_negative_entries_rejected_unless_signed():
    with pytest.raises(ValueError):
        MatrixSeq(-np.ones((2, 2, 2)))
    MatrixSeq(-np.ones((2, 2, 2)), signed=True)


# --- algebraic properties on random 2x2 sequences -------------------------

seqs = st.integers(min_value=0, max_value=2 ** 32 - 1)


def _rand(seed, n=8):
    return MatrixSeq(np.random.default_rng(seed).random((n, 2, 2)))


@settings(max_examples=40, deadline=None)
@given(seqs, seqs, seqs)
def test_convolution_associative(s1, s2, s3):
    a, b, c = _rand(s1), _rand(s2), _rand(s3)
    lhs = convolve(convolve(a, b), c).entries
    rhs = convolve(a, convolve(b, c)).entries
    assert np.abs(lhs - rhs).max() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(seqs, seqs, seqs)
def test_convolution_distributes(s1, s2, s3):
    a, b, c = _rand(s1), _rand(s2), _rand(s3)
    bc = MatrixSeq(b.entries + c.entries)
    lhs = convolve(a, bc).entries
    rhs = convolve(a, b).entries + convolve(a, c).entries
    assert np.abs(lhs - rhs).max() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(seqs, seqs, st.integers(min_value=0, max_value=14))
def test_tail_of_convolution_decomposes(s1, s2, k):
    a, b = _rand(s1), _rand(s2)
    c = convolve(a, b)
    lhs = tail(c)[k]
    abar, bbar = tail(a), tail(b)
    # ā(k) Σb + Σ_{l<=k} a(l) b̄(k-l)
    rhs = abar[k] @ b.total() + sum(a[l] @ bbar[k - l] for l in range(k + 1))
    assert np.abs(lhs - rhs).max() <= 1e-10


@settings(max_examples=30, deadline=None)
@given(seqs, seqs)
def test_nonnegative_inputs_give_nonnegative_outputs(s1, s2):
    a, b = _rand(s1), _rand(s2)
    assert convolve(a, b).entries.min() >= 0
    assert tail(a).entries.min() >= 0


# --- convolution-tail bounds for subexponential reference tails -----------

@settings(max_examples=12, deadline=None)
@given(seqs)
def test_neumann_series_tail_bound(seed):
    m, total, tilde = subexp_sequence(seed)
    ratio = conv_power_tail_sum(m, 1.0, K_CHECK, total=total) / ref_tail(K_CHECK)
    limit = neumann_tail_bound(total, tilde)
    assert np.all(ratio <= 1.05 * limit)
    assert np.all(ratio >= 0.95 * limit)


@settings(max_examples=12, deadline=None)
@given(seqs, seqs)
def test_product_tail_bound(s1, s2):
    m, mt, mtil = subexp_sequence(s1)
    n, nt, ntil = subexp_sequence(s2)
    c = convolve(m, n, K_CHECK)
    ratio = (mt @ nt - c.total()) / ref_tail(K_CHECK)
    limit = product_tail_bound(mt, mtil, nt, ntil)
    assert np.all(ratio <= 1.05 * limit)
    assert np.all(ratio >= 0.95 * limit)
