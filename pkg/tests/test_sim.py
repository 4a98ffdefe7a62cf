import numpy as np
import pytest

from bmapretrial import arrivals, retrial, sim
from bmapretrial.sim import SimConfig
from conftest import C2, D2_SEQ


@pytest.fixture(scope="module")
def mm1_sim(mm1):
    bmap, service, _ = mm1
    return sim.simulate_retrial(SimConfig(bmap, service, 1.0, 1_000_000, 10_000, 5, 4, 60))


def test_deterministic(mm1):
    bmap, service, _ = mm1
    cfg = SimConfig(bmap, service, 1.0, 50_000, 1000, 9, 2, 40)
    a = sim.simulate_retrial(cfg)
    b = sim.simulate_retrial(cfg)
    for name in a.mean:
        assert np.array_equal(a.mean[name], b.mean[name])
    assert a.counts == b.counts


def test_threads_do_not_change_results(mm1):
    bmap, service, _ = mm1
    one = sim.simulate_retrial(SimConfig(bmap, service, 1.0, 50_000, 1000, 9, 3, 40, workers=1))
    many = sim.simulate_retrial(SimConfig(bmap, service, 1.0, 50_000, 1000, 9, 3, 40, workers=3))
    assert np.array_equal(one.mean["p0"], many.mean["p0"])


def test_conservation(mm1_sim):
    for c in mm1_sim.counts:
        assert c["arrivals"] - c["completions"] == c["in_system"]


def test_busy_fraction(mm1_sim):
    per = np.array([r["p1"].sum() for r in mm1_sim.per_replication])
    se = per.std(ddof=1) / np.sqrt(len(per))
    assert abs(per.mean() - 0.5) < 3 * se + 1e-3


def test_background_marginal():
    bmap = arrivals.validate_bmap(C2, D2_SEQ)
    service = arrivals.ServiceModel("exponential", {"rate": 4.0})
    emp = sim.simulate_retrial(SimConfig(bmap, service, 1.5, 400_000, 10_000, 2, 6, 200))
    mean, se = sim.background_marginal(emp)
    assert np.all(np.abs(mean - bmap.pi) < 3 * se)


def test_against_analytic(mm1_sim, mm1_retrial):
    _, _, ret = mm1_retrial
    ana = {n: ret.vectors(n + "_seq")[:200] for n in ("p0", "p1")}
    cmp = sim.compare_empirical(mm1_sim, ana)
    assert cmp["tv"] < 0.02


def test_negative_control(mm1, mm1_sim):
    bmap, service, kernel = mm1
    _, _, wrong = retrial.solve(bmap, kernel, 2.0, 200)
    cmp = sim.compare_empirical(mm1_sim, {"p0": wrong.vectors("p0_seq")[:200]})
    assert cmp["max_abs_z"] > 5


def test_warmup_insensitive(mm1, mm1_retrial):
    bmap, service, _ = mm1
    p0 = mm1_retrial[2].vectors("p0_seq")[:200]
    tvs = []
    for warm in (1_000, 100_000):
        emp = sim.simulate_retrial(SimConfig(bmap, service, 1.0, 400_000, warm, 4, 4, 60))
        tvs.append(sim.compare_empirical(emp, {"p0": p0})["tv"])
    assert max(tvs) < 0.02 and abs(tvs[0] - tvs[1]) < 0.01


def test_individual_clocks_agree(mm1):
    bmap, service, _ = mm1
    cfg = SimConfig(bmap, service, 1.0, 200_000, 1000, 5, 4, 60)
    agg = sim.simulate_retrial(cfg)
    ind = sim.simulate_retrial_individual(cfg)
    tv = 0.5 * sum(np.abs(agg.mean[n] - ind.mean[n]).sum() for n in ("p0", "p1"))
    assert tv < 0.02


def test_standard_queue(mm1, mm1_standard):
    bmap, service, _ = mm1
    emp = sim.simulate_standard(SimConfig(bmap, service, None, 500_000, 10_000, 3, 4, 60))
    x = mm1_standard.x_seq.entries[:, 0, :]
    cmp = sim.compare_empirical(emp, {"x": x}, totals={"x": bmap.pi})
    assert cmp["tv"] < 0.02
    assert not emp.retrial


def test_invalid_configs(mm1):
    bmap, service, _ = mm1
    with pytest.raises(ValueError):
        SimConfig(bmap, service, 1.0, 0)
    with pytest.raises(ValueError):
        SimConfig(bmap, service, -1.0)
    with pytest.raises(ValueError):
        sim.simulate_retrial(SimConfig(bmap, service, None, 10))


def test_unstable_warns():
    bmap = arrivals.validate_bmap([[-1.0]], [[[1.0]]])
    service = arrivals.ServiceModel("exponential", {"rate": 0.9})
    with pytest.warns(RuntimeWarning):
        sim.simulate_retrial(SimConfig(bmap, service, 1.0, 20_000, 0, 1, 1, 20))
