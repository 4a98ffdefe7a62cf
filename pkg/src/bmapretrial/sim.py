"""Discrete-event simulation of the BMAP/GI/1 queue with and without retrials.

Each replication owns a numpy Generator derived from the master seed by
``SeedSequence(seed).spawn(replications)``. The event loop reads pre-drawn
uniforms and service times from buffers, so both backends follow the same
sample path; they differ only by last-place rounding in the transcendental
functions. A fixed seed on a fixed backend is bit-reproducible. Occupancy is
accumulated as time weights, not event samples.
"""
import heapq
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

BUFFER = 1 << 18


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    Attributes:
        bmap, service: the arrival process and service law.
        mu: retrial rate, or None for the standard FIFO queue.
        horizon_events: events counted after warmup, per replication.
        warmup_events: events discarded at the start of each replication.
        seed: master seed.
        replications: independent runs; standard errors need at least two.
        max_tracked_level: levels at or above it share one overflow bucket.
        workers: threads used to run replications.
    """

    bmap: object
    service: object
    mu: float | None = None
    horizon_events: int = 1_000_000
    warmup_events: int = 10_000
    seed: int = 0
    replications: int = 4
    max_tracked_level: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.warmup_events < 0 or self.horizon_events <= 0:
            raise ValueError("need horizon_events > 0 and warmup_events >= 0")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.mu is not None and not self.mu > 0:
            raise ValueError("retrial rate mu must be positive")


@dataclass(frozen=True)
class EmpiricalDist:
    """Time-weighted occupancy estimates.

    ``mean[name]`` and ``se[name]`` are (L+1, M) arrays over level 0..L, the
    last row being the overflow bucket. Names are ``p0``, ``p1``, ``x_mu``
    for the retrial queue and ``x`` for the standard queue.
    """

    mean: dict
    se: dict
    per_replication: list
    counts: list
    overflow: bool
    retrial: bool
    meta: dict = field(default_factory=dict)


def event_tables(bmap):
    """Per-phase cumulative jump probabilities and the shared event codes.

    Code ``k * M + j`` means a batch of size k with the phase moving to j;
    k = 0 is a phase change without arrival.
    """
    M = bmap.M
    D = bmap.D_seq.entries
    nD = len(D)
    rate_out = -np.diag(bmap.C).copy()
    probs = np.zeros((M, nD * M))
    for i in range(M):
        row = bmap.C[i].copy()
        row[i] = 0.0
        probs[i, :M] = row
        for k in range(1, nD):
            probs[i, k * M:(k + 1) * M] = D[k][i]
    probs /= rate_out[:, None]
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    codes = np.arange(nD * M, dtype=np.int64)
    return rate_out, np.ascontiguousarray(cum), codes


def _one_replication(cfg, rep_seed):
    rng = np.random.Generator(np.random.PCG64(rep_seed))
    bmap = cfg.bmap
    M = bmap.M
    rate_out, cum, codes = event_tables(bmap)
    L = cfg.max_tracked_level
    retrial = cfg.mu is not None
    occ = np.zeros((L + 1, 2, M)) if retrial else np.zeros((L + 1, M))
    state_f = np.zeros(2)
    state_i = np.zeros(7, dtype=np.int64)
    total = cfg.warmup_events + cfg.horizon_events
    kern = _kernels.kernel("sim_retrial" if retrial else "sim_standard")
    while state_i[3] < total:
        u = rng.random(BUFFER)
        sv = np.ascontiguousarray(cfg.service.sample(rng, BUFFER // 2), dtype=float)
        if retrial:
            kern(state_f, state_i, u, sv, rate_out, cum, codes, M, float(cfg.mu),
                 cfg.warmup_events, total, occ)
        else:
            kern(state_f, state_i, u, sv, rate_out, cum, codes, M, cfg.warmup_events, total, occ)
    T = occ.sum()
    dist = occ / T
    in_system = int(state_i[1] + (state_i[2] if retrial else 0))
    counts = {"arrivals": int(state_i[4]), "completions": int(state_i[5]),
              "in_system": in_system, "events": int(state_i[3]), "time": float(state_f[0])}
    if retrial:
        p0 = dist[:, 0, :]
        p1 = dist[:, 1, :]
        x_mu = p0.copy()
        x_mu[1:] += p1[:-1]
        x_mu[-1] += p1[-1]
        out = {"p0": p0, "p1": p1, "x_mu": x_mu}
    else:
        out = {"x": dist}
    return out, counts, bool(state_i[6])


def _run(cfg):
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.replications)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(lambda s: _one_replication(cfg, s), seeds))
    else:
        results = [_one_replication(cfg, s) for s in seeds]
    # merge in replication order
    reps = [r[0] for r in results]
    counts = [r[1] for r in results]
    overflow = any(r[2] for r in results)
    if overflow:
        warnings.warn("orbit or queue exceeded max_tracked_level; top bucket aggregates the rest",
                      RuntimeWarning)
    mean, se = {}, {}
    for name in reps[0]:
        stack = np.array([r[name] for r in reps])
        mean[name] = stack.mean(axis=0)
        if len(reps) > 1:
            se[name] = stack.std(axis=0, ddof=1) / np.sqrt(len(reps))
        else:
            se[name] = np.full_like(mean[name], np.nan)
    return EmpiricalDist(mean, se, reps, counts, overflow, cfg.mu is not None,
                         {"backend": _kernels.BACKEND, "seed": cfg.seed})


def simulate_retrial(cfg):
    """Simulate the retrial queue; the orbit retries at aggregate rate n*mu while the server idles."""
    if cfg.mu is None:
        raise ValueError("simulate_retrial needs a retrial rate mu")
    _warn_unstable(cfg)
    return _run(cfg)


def simulate_standard(cfg):
    """Simulate the standard FIFO queue."""
    if cfg.mu is not None:
        cfg = SimConfig(cfg.bmap, cfg.service, None, cfg.horizon_events, cfg.warmup_events,
                        cfg.seed, cfg.replications, cfg.max_tracked_level, cfg.workers)
    _warn_unstable(cfg)
    return _run(cfg)


def _warn_unstable(cfg):
    rho = cfg.bmap.lam * cfg.service.mean
    if rho >= 1:
        warnings.warn(f"traffic intensity {rho:.4f} >= 1; occupancy will not settle", RuntimeWarning)


def compare_empirical(emp, analytic, totals=None):
    """TV distance and per-cell z-scores against analytic (n, M) arrays.

    Args:
        emp: an EmpiricalDist.
        analytic: dict name -> (n, M) array; names must be present in ``emp``.
        totals: optional dict name -> full per-phase mass, for analytic
            sequences whose window misses part of the distribution. Mass
            beyond the tracked levels is compared with the overflow bucket.

    Returns:
        dict with ``tv``, ``max_abs_z``, and ``z`` (per name).
    """
    tv = 0.0
    zmax = 0.0
    zs = {}
    for name, ana in analytic.items():
        ana = np.asarray(ana, dtype=float)
        e = emp.mean[name]
        se = emp.se[name]
        n = min(len(e) - 1, len(ana))
        diff = e[:n] - ana[:n]
        tail_ana = ana[n:].sum(axis=0)
        if totals is not None and name in totals:
            tail_ana = tail_ana + np.maximum(np.asarray(totals[name]) - ana.sum(axis=0), 0.0)
        tail_emp = e[n:].sum(axis=0)
        tv += 0.5 * (np.abs(diff).sum() + np.abs(tail_emp - tail_ana).sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se[:n] > 0, diff / se[:n], 0.0)
        zs[name] = z
        if z.size:
            zmax = max(zmax, float(np.abs(z).max()))
    return {"tv": float(tv), "max_abs_z": zmax, "z": zs}


def background_marginal(emp):
    """Time fraction per background phase, with standard errors."""
    per = []
    for r in emp.per_replication:
        if emp.retrial:
            per.append(r["p0"].sum(axis=0) + r["p1"].sum(axis=0))
        else:
            per.append(r["x"].sum(axis=0))
    per = np.array(per)
    se = per.std(axis=0, ddof=1) / np.sqrt(len(per)) if len(per) > 1 else np.full(per.shape[1], np.nan)
    return per.mean(axis=0), se


def simulate_retrial_individual(cfg):
    """Reference simulation with one exponential retrial clock per orbit customer.

    Plain Python; meant for small horizons. A customer that retries into a
    busy server draws a fresh retrial time.
    """
    if cfg.mu is None:
        raise ValueError("needs a retrial rate mu")
    bmap = cfg.bmap
    M = bmap.M
    rate_out, cum, codes = event_tables(bmap)
    L = cfg.max_tracked_level
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.replications)
    reps = []
    for s in seeds:
        rng = np.random.Generator(np.random.PCG64(s))
        occ = np.zeros((L + 1, 2, M))
        t = 0.0
        phase = 0
        busy = False
        s_end = np.inf
        orbit = []
        next_bg = rng.exponential(1 / rate_out[phase])
        total = cfg.warmup_events + cfg.horizon_events
        for ev in range(total):
            t_retry = orbit[0] if orbit else np.inf
            t_next = min(next_bg, s_end, t_retry)
            if ev >= cfg.warmup_events:
                occ[min(len(orbit), L), int(busy), phase] += t_next - t
            t = t_next
            if t_next == s_end:
                busy = False
                s_end = np.inf
            elif t_next == t_retry:
                heapq.heappop(orbit)
                if busy:
                    heapq.heappush(orbit, t + rng.exponential(1 / cfg.mu))
                else:
                    busy = True
                    s_end = t + cfg.service.sample(rng, 1)[0]
            else:
                e = int(np.searchsorted(cum[phase], rng.random(), side="right"))
                code = codes[min(e, len(codes) - 1)]
                k, phase = divmod(int(code), M)
                for _ in range(k):
                    if not busy:
                        busy = True
                        s_end = t + cfg.service.sample(rng, 1)[0]
                    else:
                        heapq.heappush(orbit, t + rng.exponential(1 / cfg.mu))
                next_bg = t + rng.exponential(1 / rate_out[phase])
        dist = occ / occ.sum()
        reps.append({"p0": dist[:, 0, :], "p1": dist[:, 1, :]})
    mean = {n: np.mean([r[n] for r in reps], axis=0) for n in ("p0", "p1")}
    se = {n: (np.std([r[n] for r in reps], axis=0, ddof=1) / np.sqrt(len(reps))
              if len(reps) > 1 else np.full_like(mean[n], np.nan)) for n in ("p0", "p1")}
    return EmpiricalDist(mean, se, reps, [], False, True, {"reference": "individual clocks"})
