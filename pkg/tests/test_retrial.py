import dataclasses

import numpy as np
import pytest

from bmapretrial import arrivals, retrial, tails
from bmapretrial.matseq import MatrixSeq
from conftest import random_bmap


def test_mm1_limit_blocks(mm1_retrial):
    blocks, _, _ = mm1_retrial
    assert blocks.limit_block(-1)[0, 0] == pytest.approx(1 / 3, abs=1e-12)
    assert blocks.limit_block(0)[0, 0] == pytest.approx(11 / 18, abs=1e-12)
    for k in range(1, 15):
        assert blocks.limit_block(k)[0, 0] == pytest.approx(3.0 ** -(k + 2), abs=1e-12)
    assert blocks.breve_block(1, 0)[0, 0] == pytest.approx(4 / 9, abs=1e-12)


def test_mm1_limit_chain(mm1_retrial):
    _, lds, _ = mm1_retrial
    lim = lds.limit
    assert lim.G[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert lim.U0[0, 0] == pytest.approx(2 / 3, abs=1e-12)
    assert lim.R[0, 0] == pytest.approx(0.25, abs=1e-10)
    assert lds.rho_breve == pytest.approx(0.75)


def test_mm1_level_dependent(mm1_retrial):
    _, lds, _ = mm1_retrial
    for n in (1, 2, 5, 50, 1000):
        assert lds.U_list[n][0, 0] == pytest.approx(2 / 3, abs=1e-12)
        assert lds.G(n).sum() == pytest.approx(1.0, abs=1e-12)


def test_mm1_stationary(mm1_retrial):
    _, _, ret = mm1_retrial
    p0 = ret.vectors("p0_seq")
    p1 = ret.vectors("p1_seq")
    assert p0.sum() == pytest.approx(0.5, abs=1e-10)
    assert p1.sum() + ret.p1_seq.tail_mass_bound == pytest.approx(0.5, abs=1e-10)
    assert ret.vectors("x_mu_seq")[0, 0] == pytest.approx(p0[0, 0], abs=1e-15)
    assert np.all(ret.vectors("q_seq") > 0)


def test_blocks_stochastic(m2_retrial):
    blocks, _, _ = m2_retrial
    for n in (1, 2, 7, 10**6):
        rows = blocks.breve_block(n, -1) + sum(blocks.breve_block(n, k) for k in range(0, 50))
        rows = rows + blocks.breve_tail(n, 49)
        assert np.abs(rows.sum(axis=1) - 1).max() < 1e-12
        assert min(blocks.breve_block(n, k).min() for k in range(-1, 50)) >= 0


def test_level_dependent_matrices(m2_retrial):
    blocks, lds, _ = m2_retrial
    for n in (1, 2, 3, 50, 500):
        assert np.abs(lds.G(n).sum(axis=1) - 1).max() < 1e-10
        assert np.abs(retrial.U_breve(blocks, lds, n) - lds.U_list[n]).max() < 1e-12


def test_oracle_agreement(m2, m2_retrial):
    blocks, _, ret = m2_retrial
    L = 200
    oracle = retrial.truncated_oracle_q(blocks, L)
    q = ret.vectors("q_seq")[:L]
    o = oracle[:L] / oracle[:L].sum()
    assert 0.5 * np.abs(q / q.sum() - o).sum() < 1e-8


def test_mass_balance(m2, m2_retrial):
    _, _, ret = m2_retrial
    rho = m2[2].rho
    assert ret.vectors("p0_seq").sum() + ret.p0_seq.tail_mass_bound == pytest.approx(1 - rho, abs=1e-9)
    assert ret.vectors("p1_seq").sum() + ret.p1_seq.tail_mass_bound == pytest.approx(rho, abs=1e-8)
    phase = ret.vectors("p0_seq").sum(axis=0) + ret.vectors("p1_seq").sum(axis=0)
    assert np.abs(phase - m2[0].pi).max() < 1e-8


def test_gf_identities(m2, m2_retrial):
    bmap, _, kernel = m2
    _, _, ret = m2_retrial
    res = retrial.verify_gf_identities(ret, kernel, bmap, 1.5, [0.3, 0.6, 0.9])
    assert max(max(v) for v in res.values()) < 1e-10


def test_gf_identities_negative_control(m2, m2_retrial):
    bmap, _, kernel = m2
    _, _, ret = m2_retrial
    p0 = ret.p0_seq.entries.copy()
    p0[1:6] *= 1.3
    bad = dataclasses.replace(ret, p0_seq=MatrixSeq(p0, 0, ret.p0_seq.tail_mass_bound))
    res = retrial.verify_gf_identities(bad, kernel, bmap, 1.5, [0.3, 0.6, 0.9])
    assert max(max(v) for v in res.values()) > 1e-2


def test_row_sum_bound(m2_retrial):
    blocks, lds, _ = m2_retrial
    res = tails.row_sum_bound(blocks, lds)
    assert res["pass"]
    for sums in res["row_sums"].values():
        assert np.all(sums <= res["bound"] * (1 + 1e-12))
    assert 0 < res["xi"] < 1


def test_invalid_mu(m2):
    with pytest.raises(ValueError):
        retrial.build_blocks(m2[0], m2[2], 0.0)


@pytest.mark.parametrize("seed", range(2))
def test_random_models_agree_with_oracle(seed):
    bmap = random_bmap(300 + seed, 2)
    service = arrivals.ServiceModel("exponential", {"rate": 1.8 * bmap.lam})
    kernel = arrivals.build_kernel(bmap, service, 300)
    blocks, _, ret = retrial.solve(bmap, kernel, 0.8 + seed, 60)
    oracle = retrial.truncated_oracle_q(blocks, 60)
    q = ret.vectors("q_seq")[:60]
    o = oracle[:60]
    assert 0.5 * np.abs(q / q.sum() - o / o.sum()).sum() < 1e-8
    p0 = ret.vectors("p0_seq")
    assert p0.min() > 0 and p0.sum() == pytest.approx(1 - kernel.rho, abs=1e-9)


def test_G2_by_monte_carlo(m2_retrial):
    """First passage 2 -> 1 of the uniformized chain, sampled from its blocks."""
    blocks, lds, _ = m2_retrial
    M = blocks.M
    top = 80
    # rows over (level offset -1..top, phase) for each starting level 1..top
    cum = np.zeros((top + 1, M, (top + 1) * M))
    for n in range(1, top + 1):
        P = [blocks.breve_block(n, k) for k in range(-1, top)]
        P[-1] = P[-1] + blocks.breve_tail(n, top - 2)
        cum[n] = np.cumsum(np.concatenate(P, axis=1), axis=1)
    rng = np.random.default_rng(11)
    N = 40000
    level = np.full(N, 2)
    phase = np.repeat(np.arange(M), N // M)
    start = phase.copy()
    active = np.ones(N, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        u = rng.random(len(idx))
        rows = cum[level[idx], phase[idx]]
        pick = (rows < u[:, None] * rows[:, -1:]).sum(axis=1)
        step, phase[idx] = divmod(pick, M)
        level[idx] += step - 1
        assert level[idx].max() < top
        active[idx] = level[idx] > 1
    G2 = lds.G(2)
    for i in range(M):
        hit = phase[start == i]
        for j in range(M):
            p = np.mean(hit == j)
            se = np.sqrt(p * (1 - p) / len(hit))
            assert abs(p - G2[i, j]) < 3 * se + 1e-12
