import numpy as np
import pytest

from bmapretrial import arrivals, decomp, mg1
from bmapretrial.matseq import MatrixSeq
from conftest import random_bmap


@pytest.fixture(scope="module")
def m2_decomp(m2, m2_standard):
    return decomp.decompose(m2_standard, m2[2], 300)


def test_scalar_X2_is_x(mm1, mm1_standard):
    X2 = decomp.compute_X2(mm1_standard, mm1[2])
    x = mg1.x_vectors(mm1_standard)
    assert np.abs(X2.entries[:, 0, 0] - x[:, 0]).max() < 1e-15
    assert np.allclose(X2.entries[:40, 0, 0], 0.5 * 0.5 ** np.arange(40), atol=1e-10)


def test_scalar_X_has_no_negative_part(mm1, mm1_standard):
    res = decomp.decompose(mm1_standard, mm1[2], 200)
    X = res.X_seq
    assert np.abs(X.entries[:-X.k_min]).max() < 1e-13
    assert np.allclose(X.entries[-X.k_min:, 0, 0], res.X2_seq.entries[:X.k_max + 1, 0, 0], atol=1e-15)
    assert res.exact_zero and res.gamma == 0.0


def test_X1_structure(m2_standard):
    G = m2_standard.G
    X1 = decomp.compute_X1(G, 5).entries
    assert np.array_equal(X1[0], np.eye(2))
    assert np.allclose(X1[3], np.linalg.matrix_power(G, 3) - np.linalg.matrix_power(G, 2), atol=1e-15)


def test_g_annihilates_X_down_to_x(m2, m2_standard, m2_decomp):
    g = m2_standard.g
    x = mg1.x_vectors(m2_standard)
    X2 = m2_decomp.X2_seq.entries
    assert np.abs(np.einsum("i,kij->kj", g, X2) - x[:len(X2)]).max() < 1e-10
    X = m2_decomp.X_seq
    ks = np.arange(0, X.k_max + 1)
    gX = np.einsum("i,kij->kj", g, X.entries[ks - X.k_min])
    assert np.abs(gX - x[ks]).max() < 1e-8
    assert m2_decomp.X2_seq.entries.min() >= 0


def test_X_sums_to_e_pi(m2, m2_decomp):
    total = m2_decomp.X_seq.total()
    pi = m2[0].pi
    assert np.abs(total - np.outer(np.ones(2), pi)).max() < 1e-9


def test_tail_form_of_X(m2_standard, m2_decomp):
    K = 200
    Xbar = decomp.xbar_from_X2(m2_standard, m2_decomp.X2_seq, K).entries
    X = m2_decomp.X_seq
    # consecutive tails differ by the next coefficient
    diff = Xbar[:-1] - Xbar[1:]
    nxt = np.array([X[k + 1] for k in range(len(Xbar) - 1)])
    assert np.abs(diff - nxt).max() < 1e-9
    assert Xbar.min() >= -1e-15
    # and the tail is e pi minus everything up to k
    cum = np.cumsum(X.entries, axis=0)[-X.k_min:-X.k_min + len(Xbar)]
    eps = np.outer(np.ones(2), m2_standard.g @ np.linalg.inv(np.eye(2) - m2_standard.U0)
                   @ np.linalg.inv(np.eye(2) - m2_standard.R) * (1 - m2_standard.rho))
    assert np.abs(Xbar - (eps[None] - cum)).max() < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_negative_part_decays_like_subdominant_eigenvalue(seed):
    bmap = random_bmap(200 + seed, 2)
    kernel = arrivals.build_kernel(bmap, arrivals.ServiceModel("exponential", {"rate": 1.6 * bmap.lam}), 400)
    sol = mg1.solve(kernel)
    res = decomp.decompose(sol, kernel, 200)
    assert res.gamma < 1 and res.quality >= 0.99
    assert abs(res.gamma - decomp.subdominant_modulus(sol.G)) < 0.05


def test_mm1_decomposition_identity(mm1, mm1_standard, mm1_retrial):
    _, _, ret = mm1_retrial
    res = decomp.decompose(mm1_standard, mm1[2], 200)
    out = decomp.verify_decomposition(ret.p0_seq, res.X_seq, ret.x_mu_seq, 0.5)
    assert out["max"] < 1e-6
    assert ret.vectors("x_mu_seq")[0] == pytest.approx(ret.vectors("p0_seq")[0])


def test_decomposition_negative_control(mm1, mm1_standard, mm1_retrial):
    _, _, ret = mm1_retrial
    res = decomp.decompose(mm1_standard, mm1[2], 200)
    zero = MatrixSeq(np.zeros_like(ret.p0_seq.entries))
    out = decomp.verify_decomposition(zero, res.X_seq, ret.x_mu_seq, 0.5)
    assert out["max"] > 1e-2


def test_decomposition_window_too_small(mm1, mm1_standard, mm1_retrial):
    _, _, ret = mm1_retrial
    res = decomp.decompose(mm1_standard, mm1[2], 200)
    short = MatrixSeq(ret.p0_seq.entries[:5])
    with pytest.raises(ValueError):
        decomp.verify_decomposition(short, MatrixSeq(res.X_seq.entries[:5], -2, None, True),
                                    ret.x_mu_seq, 0.5)
