import json
import os
import subprocess
import sys

import numpy as np

from bmapretrial import _kernels

SCRIPT = r"""
import json, numpy as np
from bmapretrial import _kernels, arrivals, mg1, retrial, sim
C = [[-2.0, 1.0], [1.0, -3.0]]
D = [[[0.6, 0.2], [0.3, 1.3]], [[0.1, 0.1], [0.2, 0.2]]]
bmap = arrivals.validate_bmap(C, D)
service = arrivals.ServiceModel("exponential", {"rate": 4.0})
kernel = arrivals.build_kernel(bmap, service, 300)
sol = mg1.solve(kernel)
_, lds, ret = retrial.solve(bmap, kernel, 1.5, 60, n_star=3000)
emp = sim.simulate_retrial(sim.SimConfig(bmap, service, 1.5, 20000, 100, 3, 2, 40))
print(json.dumps({"backend": _kernels.BACKEND, "A": kernel.A_seq.entries.tolist(),
                  "x": mg1.x_vectors(sol).tolist(), "G5": lds.G(5).tolist(),
                  "q": ret.vectors("q_seq").tolist(), "sim": emp.mean["p0"].tolist(),
                  "counts": emp.counts}))
"""


def _run(disable):
    env = dict(os.environ)
    env[_kernels.ENV_FLAG] = "1" if disable else "0"
    proc = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True,
                          check=True)
    return json.loads(proc.stdout)


def test_backends_agree():
    fast = _run(False)
    slow = _run(True)
    assert fast["backend"] == "numba" and slow["backend"] == "numpy"
    for name in ("A", "x", "G5", "q"):
        assert np.allclose(fast[name], slow[name], rtol=1e-10, atol=1e-14), name
    # same random stream in the same order: same path, rounding-level differences
    assert fast["counts"] == slow["counts"]
    assert np.allclose(fast["sim"], slow["sim"], rtol=1e-12, atol=0)


def test_flag_parsing(monkeypatch):
    for value, expected in (("1", True), ("yes", True), ("0", False), ("", False)):
        monkeypatch.setenv(_kernels.ENV_FLAG, value)
        assert _kernels.numba_disabled_by_env() is expected
