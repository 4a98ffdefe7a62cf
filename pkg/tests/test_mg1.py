import numpy as np
import pytest

from bmapretrial import arrivals, mg1
from conftest import random_bmap


def test_mm1_closed_forms(mm1_standard):
    sol = mm1_standard
    assert sol.G[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert sol.U0[0, 0] == pytest.approx(1 / 3, abs=1e-12)
    k = np.arange(1, 40)
    assert np.allclose(sol.R_seq.entries[1:40, 0, 0], 0.5 * 3.0 ** -k, atol=1e-12)
    assert sol.R[0, 0] == pytest.approx(0.25, abs=1e-12)
    assert sol.pi_identity()[0] == pytest.approx(1.0, abs=1e-12)


def test_mm1_queue_length(mm1_standard):
    x = mg1.x_vectors(mm1_standard)[:51, 0]
    assert np.allclose(x, 0.5 * 0.5 ** np.arange(51), atol=1e-10, rtol=0)


def test_mm1_rg_factorization_at_half(mm1, mm1_standard):
    res = mg1.verify_rg_factorization(mm1_standard, mm1[2], [0.5])
    assert res[0.5] < 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_random_models(seed):
    bmap = random_bmap(100 + seed, 2 + seed % 2)
    service = arrivals.ServiceModel("exponential", {"rate": 1.6 * bmap.lam})
    kernel = arrivals.build_kernel(bmap, service, 400)
    sol = mg1.solve(kernel)
    assert np.abs(sol.G.sum(axis=1) - 1).max() < 1e-9
    assert np.all(sol.G > 0)
    assert np.abs(sol.g @ sol.G - sol.g).max() < 1e-12 and sol.g.sum() == pytest.approx(1.0)
    assert np.max(np.abs(np.linalg.eigvals(sol.R))) < 1
    assert np.all(np.linalg.inv(np.eye(sol.M) - sol.U0) >= np.eye(sol.M) - 1e-15)
    assert np.abs(sol.pi_identity() - bmap.pi).max() < 1e-8
    rg = mg1.verify_rg_factorization(sol, kernel, [0.25, 0.9])
    assert max(rg.values()) < 1e-8
    forms = mg1.verify_x_forms(sol, kernel, [0.3, 0.7])
    assert max(forms.values()) < 1e-8
    x = mg1.x_vectors(sol)
    assert x.min() >= 0
    assert np.abs(x.sum(axis=0) - bmap.pi).max() <= sol.x_seq.tail_mass_bound + 1e-12


def test_near_critical_converges():
    bmap = arrivals.validate_bmap([[-1.0]], [[[1.0]]])
    service = arrivals.ServiceModel("exponential", {"rate": 1 / 0.999})
    kernel = arrivals.build_kernel(bmap, service, 200)
    G, iterations = mg1.solve_G(mg1.kernel_blocks(kernel))
    assert abs(G[0, 0] - 1) < 1e-9
    assert iterations > 1000


def test_unstable_refused():
    bmap = arrivals.validate_bmap([[-1.0]], [[[1.0]]])
    kernel = arrivals.build_kernel(bmap, arrivals.ServiceModel("exponential", {"rate": 1.0}), 50)
    with pytest.raises(ValueError, match="unstable system"):
        mg1.solve(kernel)


def test_mixing_horizon(m2_standard):
    G = m2_standard.G
    m = mg1.mixing_horizon(G, 1e-12)
    P = np.linalg.matrix_power(G, m)
    assert np.ptp(P, axis=0).max() < 1e-12
