"""Time the hot loops under the numba and numpy backends.

Each backend runs in its own process because the backend is fixed at
import. Results go to stdout (and optionally a file) as JSON.

    python benchmarks/bench_kernels.py --repeat 3 --out bench.json
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from bmapretrial import _kernels, arrivals, mg1, retrial, sim

repeat = int(sys.argv[1])
bmap = arrivals.validate_bmap([[-2.0, 1.0], [1.0, -3.0]],
                              [[[0.6, 0.2], [0.3, 1.3]], [[0.1, 0.1], [0.2, 0.2]]])
service = arrivals.ServiceModel("exponential", {"rate": 4.0})
kernel = arrivals.build_kernel(bmap, service, 860)
sol = mg1.solve(kernel)
blocks = retrial.build_blocks(bmap, kernel, 1.5)
limit = retrial.solve_limit_chain(blocks)
A = np.ascontiguousarray(kernel.A_seq.entries)
lds = retrial.solve_level_dependent(blocks, limit, 2000)

cases = {
    "conv": lambda: _kernels.kernel("conv")(A, A, 860),
    "neumann": lambda: _kernels.kernel("neumann")(np.eye(2), sol.R_seq.entries, sol.R_seq.k_max),
    "horner_all": lambda: _kernels.kernel("horner_all")(A[1:], sol.G, np.zeros((2, 2))),
    "level_sweep_2000": lambda: retrial.solve_level_dependent(blocks, limit, 2000),
    "q_recursion_200": lambda: retrial.stationary_q(blocks, lds, 200),
    "sim_100k_events": lambda: sim.simulate_retrial(
        sim.SimConfig(bmap, service, 1.5, 100_000, 0, 0, 1, 80)),
}
out = {"backend": _kernels.BACKEND, "seconds": {}}
for name, fn in cases.items():
    fn()  # compile or warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out["seconds"][name] = best
print(json.dumps(out))
"""


def run_backend(disable_numba, repeat):
    env = dict(os.environ)
    env["BMAPRETRIAL_DISABLE_NUMBA"] = "1" if disable_numba else "0"
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3, help="timed runs per case (best is kept)")
    parser.add_argument("--out", help="also write the JSON here")
    args = parser.parse_args(argv)
    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    result = {"numba": fast["seconds"], "numpy": slow["seconds"],
              "speedup": {k: slow["seconds"][k] / fast["seconds"][k] for k in fast["seconds"]}}
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
