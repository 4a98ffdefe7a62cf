"""Command-line front end: YAML run configs in, CSV tables and a JSON report out.

Exit codes: 0 when every checked invariant holds, 1 on an invariant failure
(including an unstable model), 2 on a configuration error.
"""
import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import _kernels, arrivals, decomp, mg1, retrial, sim, tails

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# Thresholds of the verification suite.
TOL = {
    "identity": 1e-9,
    "rg": 1e-8,
    "gX": 1e-8,
    "mass": 1e-6,
    "gf": 1e-6,
    "decomposition": 1e-6,
    "oracle_tv": 1e-6,
    "level_limit": 1e-6,
    "decay_quality": 0.99,
    "decay_gap": 0.05,
    "sim_tv": 0.01,
}
ORACLE_MAX_STATES = 2000


class ConfigError(ValueError):
    """A configuration problem, located by file, line and field."""


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

SCHEMA = {
    "model": {"C": None, "D": None, "D_base": None, "batch": None, "service": None, "mu": None},
    "truncation": {"K": 200, "kernel_K": None, "quad_tol": 1e-12, "solver_tol": 1e-14,
                   "n_star": None, "depth": None},
    "study": {"tail_window": None, "z_samples": [0.3, 0.6, 0.9], "sim_events": 1_000_000,
              "sim_warmup": 10_000, "sim_replications": 4, "seed": 0,
              "max_tracked_level": None, "workers": 1, "slack": 0.25},
    "output": {"dir": "out", "report": "report.json"},
}


@dataclass
class RunConfig:
    """Parsed run configuration with the built models."""

    path: str
    model: dict
    truncation: dict
    study: dict
    output: dict
    bmap: object = None
    service: object = None
    lines: dict = field(default_factory=dict)

    @property
    def mu(self):
        return self.model.get("mu")

    @property
    def K(self):
        return self.truncation["K"]

    @property
    def kernel_K(self):
        kk = self.truncation["kernel_K"]
        if kk is not None:
            return kk
        # room for the brute-force oracle on small windows, a margin otherwise
        return 4 * self.K + 60 if self.K <= 500 else self.K + 300


def _line_map(node, prefix="", out=None):
    """Dotted field path -> 1-based line number, from a composed YAML node."""
    if out is None:
        out = {}
    if isinstance(node, yaml.MappingNode):
        for key, val in node.value:
            name = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[name] = key.start_mark.line + 1
            _line_map(val, name, out)
    return out


def _fail(cfg_path, lines, name, msg):
    line = lines.get(name)
    where = f"{cfg_path}:{line}" if line else str(cfg_path)
    raise ConfigError(f"{where}: field '{name}': {msg}")


def _matrix(value, cfg_path, lines, name, square=True):
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        _fail(cfg_path, lines, name, "expected a numeric matrix")
    if a.ndim != 2 or (square and a.shape[0] != a.shape[1]):
        _fail(cfg_path, lines, name, "expected a square matrix (list of rows)")
    return a


def resolve_config_path(name):
    """A file path, or the name of a bundled config such as ``mm1``."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("bmapretrial") / "configs" / (p.stem + ".yaml")
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"{name}: config file not found")


def bundled_configs():
    root = resources.files("bmapretrial") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(path):
    """Parse, validate and build the models of a YAML run config.

    Raises:
        ConfigError: with ``file:line: field 'x.y': message``.
    """
    path = resolve_config_path(path)
    text = path.read_text()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    lines = _line_map(node)
    sections = {}
    for sec, defaults in SCHEMA.items():
        given = data.get(sec) or {}
        if not isinstance(given, dict):
            _fail(path, lines, sec, "expected a mapping")
        for key in given:
            if key not in defaults:
                _fail(path, lines, f"{sec}.{key}", "unknown field")
        merged = dict(defaults)
        merged.update(given)
        sections[sec] = merged
    for sec in data:
        if sec not in SCHEMA:
            _fail(path, lines, sec, "unknown section")
    if "model" not in data:
        raise ConfigError(f"{path}: missing section 'model'")
    cfg = RunConfig(str(path), sections["model"], sections["truncation"], sections["study"],
                    sections["output"], lines=lines)
    _check_scalars(cfg)
    cfg.bmap = _build_bmap(cfg)
    cfg.service = _build_service(cfg)
    return cfg


def _check_scalars(cfg):
    p, ln = cfg.path, cfg.lines
    tr, st = cfg.truncation, cfg.study
    if not isinstance(tr["K"], int) or tr["K"] < 1:
        _fail(p, ln, "truncation.K", "expected a positive integer")
    if tr["depth"] is None:
        # the decomposition check needs indices beyond the negative depth
        tr["depth"] = min(decomp.NEGATIVE_DEPTH, tr["K"] // 2)
    elif not isinstance(tr["depth"], int) or not 1 <= tr["depth"] <= tr["K"] - 10:
        _fail(p, ln, "truncation.depth", "expected an integer in [1, truncation.K - 10]")
    for name in ("kernel_K", "n_star"):
        v = tr[name]
        if v is not None and (not isinstance(v, int) or v < tr["K"]):
            _fail(p, ln, f"truncation.{name}", "expected an integer >= truncation.K")
    for name in ("quad_tol", "solver_tol"):
        if not isinstance(tr[name], (int, float)) or not 0 < tr[name] < 1:
            _fail(p, ln, f"truncation.{name}", "expected a number in (0, 1)")
    zs = st["z_samples"]
    if not isinstance(zs, list) or not zs or not all(isinstance(z, (int, float)) and 0 < z < 1 for z in zs):
        _fail(p, ln, "study.z_samples", "expected a list of numbers strictly inside (0, 1)")
    for name in ("sim_events", "sim_replications", "workers"):
        if not isinstance(st[name], int) or st[name] < 1:
            _fail(p, ln, f"study.{name}", "expected a positive integer")
    for name in ("sim_warmup", "seed"):
        if not isinstance(st[name], int) or st[name] < 0:
            _fail(p, ln, f"study.{name}", "expected a nonnegative integer")
    for name in ("tail_window", "max_tracked_level"):
        v = st[name]
        if v is not None and (not isinstance(v, int) or v < 10):
            _fail(p, ln, f"study.{name}", "expected an integer >= 10")
    mu = cfg.model.get("mu")
    if mu is not None and (not isinstance(mu, (int, float)) or mu <= 0):
        _fail(p, ln, "model.mu", "expected a positive number")


def _build_bmap(cfg):
    p, ln, m = cfg.path, cfg.lines, cfg.model
    if m["C"] is None:
        _fail(p, ln, "model", "missing field 'C'")
    C = _matrix(m["C"], p, ln, "model.C")
    if m["D"] is not None and m["D_base"] is not None:
        _fail(p, ln, "model.D", "give either D or D_base with batch, not both")
    if m["D"] is not None:
        if not isinstance(m["D"], list) or not m["D"]:
            _fail(p, ln, "model.D", "expected a list of matrices D(1), D(2), ...")
        D = [_matrix(d, p, ln, "model.D") for d in m["D"]]
        try:
            return arrivals.validate_bmap(C, D)
        except ValueError as exc:
            _fail(p, ln, "model.D", str(exc))
    if m["D_base"] is None:
        _fail(p, ln, "model", "missing field 'D' (or 'D_base' with 'batch')")
    base = _matrix(m["D_base"], p, ln, "model.D_base")
    batch = m["batch"]
    if not isinstance(batch, dict) or "kind" not in batch or "K" not in batch:
        _fail(p, ln, "model.batch", "expected a mapping with kind, K and the law's parameter")
    params = {k: v for k, v in batch.items() if k not in ("kind", "K")}
    try:
        pmf = arrivals.batch_pmf(batch["kind"], int(batch["K"]), **params)
        return arrivals.bmap_from_base(C, base, pmf)
    except (KeyError, TypeError) as exc:
        _fail(p, ln, "model.batch", f"missing or bad parameter {exc}")
    except ValueError as exc:
        _fail(p, ln, "model.batch", str(exc))


def _build_service(cfg):
    p, ln = cfg.path, cfg.lines
    svc = cfg.model["service"]
    if not isinstance(svc, dict) or "kind" not in svc:
        _fail(p, ln, "model.service", "expected a mapping with 'kind' and its parameters")
    params = {k: v for k, v in svc.items() if k != "kind"}
    try:
        return arrivals.ServiceModel(svc["kind"], params)
    except KeyError as exc:
        _fail(p, ln, "model.service", f"missing parameter {exc}")
    except (TypeError, ValueError) as exc:
        _fail(p, ln, "model.service", str(exc))


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def write_table(path, rows, ks=None, tail=None):
    """CSV with header ``k,state_1..state_M[,tail]``; floats use repr for exactness."""
    rows = np.asarray(rows, dtype=float)
    if ks is None:
        ks = np.arange(len(rows))
    header = ["k"] + [f"state_{i + 1}" for i in range(rows.shape[1])]
    if tail is not None:
        header.append("tail")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, k in enumerate(ks):
            row = [int(k)] + [repr(float(v)) for v in rows[i]]
            if tail is not None:
                row.append(repr(float(tail[i])))
            w.writerow(row)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check(name, value, threshold, report, mode="max"):
    """Record a pass/fail check; mode "max" means value < threshold."""
    ok = bool(value < threshold) if mode == "max" else bool(value >= threshold)
    report.setdefault("checks", {})[name] = {"value": value, "threshold": threshold, "pass": ok}
    return ok


def _flag(name, ok, report, **extra):
    report.setdefault("checks", {})[name] = dict(extra, **{"pass": bool(ok)})
    return bool(ok)


def _all_pass(report):
    return all(c["pass"] for c in report.get("checks", {}).values())


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _header(cfg, kernel):
    return {"config": cfg.path, "backend": _kernels.BACKEND, "M": cfg.bmap.M,
            "lam": cfg.bmap.lam, "rho": kernel.rho, "pi": cfg.bmap.pi, "K": cfg.K,
            "kernel_K": kernel.K, "mu": cfg.mu,
            "bounds": {"kernel_weight_error": kernel.weight_error,
                       "kernel_window_deficit": kernel.A_seq.tail_mass_bound}}


def build_kernel(cfg):
    """Stability guard, then the arrival kernels on the configured window."""
    arrivals.check_stable(cfg.bmap, cfg.service)
    kernel = arrivals.build_kernel(cfg.bmap, cfg.service, cfg.kernel_K, cfg.truncation["quad_tol"])
    arrivals.rates(kernel, cfg.bmap, cfg.service)
    return kernel


def run_standard(cfg, kernel, report):
    sol = mg1.solve(kernel, tol=cfg.truncation["solver_tol"])
    zs = cfg.study["z_samples"]
    rg = mg1.verify_rg_factorization(sol, kernel, zs)
    forms = mg1.verify_x_forms(sol, kernel, zs)
    x = mg1.x_vectors(sol)
    pi_res = float(np.abs(sol.pi_identity() - cfg.bmap.pi).max())
    mass_res = float(np.abs(x.sum(axis=0) - cfg.bmap.pi).max())
    report["standard"] = {
        "G_iterations": sol.iterations, "G_row_sum_error": float(np.abs(sol.G.sum(axis=1) - 1).max()),
        "pi_identity": pi_res, "rg_factorization": rg, "x_generating_function": forms,
        "x_mass_error": mass_res, "bounds": {"x_tail_mass": sol.x_seq.tail_mass_bound}}
    _check("standard.pi_identity", pi_res, TOL["identity"], report)
    _check("standard.rg_factorization", max(rg.values()), TOL["rg"], report)
    _check("standard.x_generating_function", max(forms.values()), TOL["rg"], report)
    _check("standard.x_mass", max(mass_res - sol.x_seq.tail_mass_bound, 0.0), TOL["mass"], report)
    return sol


def run_retrial(cfg, kernel, report):
    if cfg.mu is None:
        raise ConfigError(f"{cfg.path}: field 'model.mu': this subcommand needs a retrial rate")
    blocks, lds, ret = retrial.solve(cfg.bmap, kernel, cfg.mu, cfg.K, cfg.truncation["n_star"],
                                     cfg.truncation["solver_tol"])
    rho = kernel.rho
    p0, p1 = ret.vectors("p0_seq"), ret.vectors("p1_seq")
    p0_err = abs(p0.sum() - (1 - rho))
    p1_err = abs(p1.sum() + ret.p1_seq.tail_mass_bound - rho)
    limit_pi = float(np.abs(lds.limit.pi_identity() - cfg.bmap.pi).max())
    Gn_rows = float(np.abs(lds.G_list[1:lds.n_star + 1].sum(axis=2) - 1).max())
    gf = retrial.verify_gf_identities(ret, kernel, cfg.bmap, cfg.mu, cfg.study["z_samples"])
    gf_max = max(max(v) for v in gf.values())
    report["retrial"] = {
        "rho_breve": lds.rho_breve, "xi": lds.xi, "n_star": lds.n_star,
        "limit_pi_identity": limit_pi, "G_n_row_sum_error": Gn_rows,
        "p0_mass_error": p0_err, "p1_mass_error": p1_err, "gf_identities": gf,
        "normaliser": ret.kappa,
        "bounds": {"p0_tail": ret.p0_seq.tail_mass_bound, "p1_tail": ret.p1_seq.tail_mass_bound,
                   "x_mu_tail": ret.x_mu_seq.tail_mass_bound, "q_tail": ret.q_seq.tail_mass_bound,
                   "block_error_at_n_star": float(np.abs(blocks.block_error_bound(lds.n_star)).max()),
                   "closure_gap": lds.closure_gap}}
    _check("retrial.limit_pi_identity", limit_pi, TOL["identity"], report)
    _check("retrial.G_n_stochastic", Gn_rows, 1e-10, report)
    _check("retrial.p0_mass", p0_err, TOL["mass"], report)
    _check("retrial.p1_mass", p1_err, TOL["mass"], report)
    _check("retrial.gf_identities", gf_max, TOL["gf"], report)
    return blocks, lds, ret


def run_decompose(cfg, kernel, sol, ret, report):
    res = decomp.decompose(sol, kernel, cfg.K, cfg.truncation["depth"])
    X = res.X_seq
    x = mg1.x_vectors(sol)
    ks = np.arange(0, X.k_max + 1)
    gX = np.einsum("i,kij->kj", sol.g, X.entries[ks - X.k_min])
    gx_res = float(np.abs(gX - x[ks]).max())
    report["decompose"] = {"gX_residual": gx_res, "decay_rate": res.gamma,
                           "decay_quality": res.quality, "exact_zero_negative_part": res.exact_zero,
                           "subdominant_modulus": decomp.subdominant_modulus(sol.G)}
    _check("decompose.gX", gx_res, TOL["gX"], report)
    if not res.exact_zero:
        gap = abs(res.gamma - decomp.subdominant_modulus(sol.G))
        _check("decompose.decay_rate_below_one", res.gamma, 1.0, report)
        _check("decompose.decay_quality", res.quality, TOL["decay_quality"], report, mode="min")
        _check("decompose.decay_rate_vs_modulus", gap, TOL["decay_gap"], report)
    if ret is not None:
        dec = decomp.verify_decomposition(ret.p0_seq, X, ret.x_mu_seq, kernel.rho)
        report["decompose"]["identity_residual"] = dec["max"]
        _check("decompose.identity", dec["max"], TOL["decomposition"], report)
    return res


def run_asymptotics(cfg, kernel, sol, blocks, lds, ret, report):
    bmap, service = cfg.bmap, cfg.service
    K = cfg.K
    tm = tails.build_tail_model(bmap, service, kernel, blocks, lds, ret.vectors("q_seq"))
    x = mg1.x_vectors(sol)[:K + 1]
    xm = ret.vectors("x_mu_seq")[:K + 1]
    xbar = tails.tail_vectors(x, total=bmap.pi)
    xmbar = tails.tail_vectors(xm, total=bmap.pi)
    p0 = ret.vectors("p0_seq")
    p0bar = tails.tail_vectors(p0).sum(axis=1) + ret.p0_seq.tail_mass_bound
    k_rel = tails.reliable_limit(p0bar, ret.p0_seq.tail_mass_bound)
    if cfg.study["tail_window"] is not None:
        k_rel = min(k_rel, cfg.study["tail_window"])
    if k_rel < 10:
        raise ValueError("empty reliable window")
    ks = np.arange(K + 1)
    PY = tm.P_Y(ks)
    pred = tails.predicted_tails(tm.cA, bmap.pi, kernel.rho, PY).entries[:, 0, :]
    r_main = tails.tail_ratio_report(xmbar, xbar, k_rel, service=service)
    r_prop = tails.tail_ratio_report(xbar, pred, k_rel, service=service)
    est = tails.empirical_cA(kernel, service, bmap.lam, np.arange(1, K + 1))
    diag = tails.tail_diagnostics(bmap, kernel, blocks, lds, ret, tm, k_rel,
                                   slack=cfg.study["slack"])
    heavy = tails.is_subexponential(service)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_state_main = np.where(xbar > 0, xmbar / xbar, np.nan)[:k_rel + 1]
        per_state_prop = np.where(pred > 0, xbar / pred, np.nan)[:k_rel + 1]
    tables = {"tail_ratio": (per_state_main, r_main["ratio"][:k_rel + 1]),
              "prediction_ratio": (per_state_prop, r_prop["ratio"][:k_rel + 1])}
    report["asymptotics"] = {
        "reliable_k": k_rel, "flag": r_main["flag"], "zeta": tm.zeta, "cA": tm.cA, "cD": tm.cD,
        "c": tm.c_q, "empirical_cA": est["estimate"], "empirical_cA_flag": est["flag"],
        "tail_ratio_windows": r_main["windows"], "tail_ratio_monotone": r_main["monotone"],
        "prediction_windows": r_prop["windows"], "prediction_monotone": r_prop["monotone"],
        "diagnostics": {key: {k: v for k, v in item.items() if k != "ratio"} for key, item in diag.items()},
        "bounds": {"p0_tail": ret.p0_seq.tail_mass_bound, "x_mu_tail": ret.x_mu_seq.tail_mass_bound,
                   "x_tail": sol.x_seq.tail_mass_bound}}
    if heavy:
        last = r_main["last"]
        _flag("asymptotics.tail_ratio_band", 0.9 <= last <= 1.1, report, value=last, band=[0.9, 1.1])
        _flag("asymptotics.tail_ratio_monotone", r_main["monotone"], report)
        lastp = r_prop["last"]
        _flag("asymptotics.prediction_band", 0.5 <= lastp <= 2.0, report, value=lastp, band=[0.5, 2.0])
        _flag("asymptotics.prediction_monotone", r_prop["monotone"], report)
        for key in "abcde":
            _flag(f"asymptotics.diagnostic_{key}", diag[key]["pass"], report)
    return tables, diag, tm


def run_simulation(cfg, kernel, report, analytic):
    st = cfg.study
    L = st["max_tracked_level"] or min(cfg.K, 400)
    sc = sim.SimConfig(cfg.bmap, cfg.service, cfg.mu, st["sim_events"], st["sim_warmup"], st["seed"],
                       st["sim_replications"], L, st["workers"])
    emp = sim.simulate_retrial(sc) if cfg.mu is not None else sim.simulate_standard(sc)
    totals = {"x": cfg.bmap.pi} if cfg.mu is None else None
    cmp = sim.compare_empirical(emp, analytic, totals)
    marg, marg_se = sim.background_marginal(emp)
    # a single phase has zero spread, so only phases with a positive SE get a z-score
    live = np.isfinite(marg_se) & (marg_se > 0)
    marg_z = float(np.abs((marg - cfg.bmap.pi)[live] / marg_se[live]).max()) if live.any() else None
    conserved = all(c["arrivals"] - c["completions"] == c["in_system"] for c in emp.counts)
    report["simulation"] = {"tv": cmp["tv"], "max_abs_z": cmp["max_abs_z"], "counts": emp.counts,
                            "overflow": emp.overflow, "background_marginal": marg,
                            "background_marginal_se": marg_se, "background_max_abs_z": marg_z,
                            "events_per_replication": st["sim_events"],
                            "replications": st["sim_replications"], "seed": st["seed"],
                            "tracked_levels": L}
    _flag("simulation.conservation", conserved, report)
    report["simulation"]["tv_within_0.01"] = bool(cmp["tv"] < TOL["sim_tv"])
    return emp


def run_verify(cfg, kernel, report):
    """Every identity that applies to the configured model."""
    A_rows = float(np.abs(kernel.A.sum(axis=1) - 1).max())
    rho_k = float(cfg.bmap.pi @ kernel.mean)
    report["kernel"] = {"A_row_sum_error": A_rows, "rho_from_kernel": rho_k}
    _check("kernel.A_stochastic", A_rows, 1e-10, report)
    _check("kernel.rho_cross_check", abs(rho_k - kernel.rho), 1e-8, report)
    sol = run_standard(cfg, kernel, report)
    ret = blocks = lds = None
    if cfg.mu is not None:
        blocks, lds, ret = run_retrial(cfg, kernel, report)
    run_decompose(cfg, kernel, sol, ret, report)
    if ret is None:
        return
    # brute-force oracle for the q-recursion
    L = 4 * cfg.K
    if (L + 1) * cfg.bmap.M <= ORACLE_MAX_STATES and L + 1 <= blocks.KA:
        q_or = retrial.truncated_oracle_q(blocks, L)
        q_or = q_or[:cfg.K + 1] / q_or.sum()
        q = ret.vectors("q_seq")
        tv = 0.5 * float(np.abs(q / q.sum() - q_or / q_or.sum()).sum())
        report["retrial"]["oracle_tv"] = tv
        _check("retrial.oracle_tv", tv, TOL["oracle_tv"], report)
    else:
        report["retrial"]["oracle_tv"] = "skipped: oracle too large for this window"
    prof = retrial.level_limit_profile(blocks, lds)
    tm = tails.build_tail_model(cfg.bmap, cfg.service, kernel, blocks, lds)
    sw = tails.sandwich_check(blocks, lds, tm.Gamma_seq)
    rs = tails.row_sum_bound(blocks, lds)
    report["level_limit"] = {"G_final": prof["G_final"], "R_final": prof["R_final"],
                             "grid": prof["grid"], "R_err": prof["R_err"],
                             "G_monotone": prof["G_monotone"], "R_monotone": prof["R_monotone"],
                             "sandwich": sw, "row_sums": rs}
    _flag("level_limit.G_monotone", prof["G_monotone"], report)
    _flag("level_limit.R_monotone", all(prof["R_monotone"].values()), report)
    final = max([prof["G_final"]] + list(prof["R_final"].values()))
    _check("level_limit.final", final, TOL["level_limit"], report)
    _flag("level_limit.sandwich", sw["pass"], report)
    _flag("level_limit.row_sum_bound", rs["pass"], report)
    if tails.is_subexponential(cfg.service):
        run_asymptotics(cfg, kernel, sol, blocks, lds, ret, report)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _tail_col(rows, total):
    # clip roundoff below zero; tails are masses
    return np.maximum(total - np.cumsum(rows.sum(axis=1)), 0.0)


def cmd_solve_standard(cfg, out, report):
    kernel = build_kernel(cfg)
    report.update(_header(cfg, kernel))
    sol = run_standard(cfg, kernel, report)
    x = mg1.x_vectors(sol)[:cfg.K + 1]
    write_table(out / "x.csv", x, tail=_tail_col(x, 1.0))


def cmd_solve_retrial(cfg, out, report):
    kernel = build_kernel(cfg)
    report.update(_header(cfg, kernel))
    _, _, ret = run_retrial(cfg, kernel, report)
    rho = kernel.rho
    for name, total in (("p0", 1 - rho), ("p1", rho), ("x_mu", 1.0), ("q", 1.0)):
        rows = ret.vectors(f"{name}_seq")
        write_table(out / f"{name}.csv", rows, tail=_tail_col(rows, total))


def cmd_decompose(cfg, out, report):
    kernel = build_kernel(cfg)
    report.update(_header(cfg, kernel))
    sol = run_standard(cfg, kernel, report)
    ret = run_retrial(cfg, kernel, report)[2] if cfg.mu is not None else None
    res = run_decompose(cfg, kernel, sol, ret, report)
    X = res.X_seq
    for i in range(cfg.bmap.M):
        write_table(out / f"X_row_{i + 1}.csv", X.entries[:, i, :], ks=X.indices())


def cmd_asymptotics(cfg, out, report):
    kernel = build_kernel(cfg)
    report.update(_header(cfg, kernel))
    if cfg.mu is None:
        raise ConfigError(f"{cfg.path}: field 'model.mu': asymptotics needs a retrial rate")
    sol = run_standard(cfg, kernel, report)
    blocks, lds, ret = run_retrial(cfg, kernel, report)
    tables, _, _ = run_asymptotics(cfg, kernel, sol, blocks, lds, ret, report)
    for name, (per_state, total) in tables.items():
        write_table(out / f"{name}.csv", per_state, tail=total)


def cmd_simulate(cfg, out, report):
    kernel = build_kernel(cfg)
    report.update(_header(cfg, kernel))
    if cfg.mu is not None:
        _, _, ret = run_retrial(cfg, kernel, report)
        analytic = {"p0": ret.vectors("p0_seq"), "p1": ret.vectors("p1_seq")}
    else:
        sol = run_standard(cfg, kernel, report)
        analytic = {"x": mg1.x_vectors(sol)}
    emp = run_simulation(cfg, kernel, report, analytic)
    for name in emp.mean:
        write_table(out / f"sim_{name}.csv", emp.mean[name])
        write_table(out / f"sim_{name}_se.csv", emp.se[name])


def cmd_verify(cfg, out, report):
    kernel = build_kernel(cfg)
    report.update(_header(cfg, kernel))
    run_verify(cfg, kernel, report)


COMMANDS = {
    "solve-standard": (cmd_solve_standard, "stationary queue length x(k) of the FIFO queue"),
    "solve-retrial": (cmd_solve_retrial, "p0, p1, x^(mu) and q of the retrial queue"),
    "decompose": (cmd_decompose, "X tables and the decomposition residuals"),
    "asymptotics": (cmd_asymptotics, "tail ratios, prediction and tail diagnostics"),
    "simulate": (cmd_simulate, "discrete-event simulation compared with the analytic tables"),
    "verify": (cmd_verify, "full identity suite with a pass/fail summary"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="bmapretrial", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="YAML config path or a bundled name "
                                      f"({', '.join(bundled_configs())})")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--quiet", action="store_true", help="suppress the summary lines")
    return parser


def run(argv=None):
    """Run a subcommand; returns the exit status."""
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    report = {"command": args.command}
    func = COMMANDS[args.command][0]
    status = EXIT_OK
    try:
        func(cfg, out, report)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        report["error"] = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_FAIL
    if status == EXIT_OK and not _all_pass(report):
        status = EXIT_FAIL
    report["status"] = "pass" if status == EXIT_OK else "fail"
    write_report(out / cfg.output["report"], report)
    if not args.quiet:
        for name, c in report.get("checks", {}).items():
            print(f"{'PASS' if c['pass'] else 'FAIL'}  {name}")
        print(f"{args.command}: {report['status']} ({out / cfg.output['report']})")
    return status


def main():
    sys.exit(run())
