"""Runs a resolved config and writes its artifacts.

Every run directory gets a manifest.json (resolved config, library version, kernel backend,
certificates) and per-command CSVs. Floats are written with 17 significant digits, and nothing
time- or host-dependent goes into a CSV, so rerunning a manifest reproduces them byte for byte.
An INCOMPLETE file marks a directory whose run has not finished.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__, kernels
from .agent import tune_setting1, tune_setting2, tune_setting2_lipschitz
from .bounds import max_norm
from .config import build_costs, build_disturbance, build_system, held_mode, trial_seed
from .engine import build_configs, run_agents
from .equilibrium import eqgap_run, path_length_check
from .errors import ConfigError
from .regret import dac_regret, linear_regret, lower_bound_experiment, regret_curve
from .stability import certify, certify_global

MARKER = "INCOMPLETE"
RECOVERY_TOL = 1e-12


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "{:.17g}".format(float(v))
    return "" if v is None else str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([fmt(v) for v in r])


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class RunResult:
    command: str
    out: str
    files: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    summary: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def certificates(cfg: dict) -> dict:
    """Per-agent and (when available) global strong-stability certificates for the configured K."""
    sys, Ks = build_system(cfg)
    out = {"agents": []}
    for i, (b, k) in enumerate(zip(sys.B, Ks)):
        try:
            out["agents"].append(dict(certify(sys.A, b, k).as_dict(), agent=i))
        except ArithmeticError as exc:
            out["agents"].append({"agent": i, "error": str(exc)})
    try:
        out["global"] = certify_global(sys.A, sys.B, Ks).as_dict()
    except ArithmeticError as exc:
        out["global"] = {"error": str(exc)}
    out["K"] = [np.asarray(k).tolist() for k in Ks]
    return out


def manifest(cfg: dict, command: str, backend: str) -> dict:
    return {"command": command, "version": __version__, "backend": backend, "config": cfg,
            "certificates": certificates(cfg)}


def _backend(cfg):
    b = cfg.get("backend", "auto")
    return kernels.BACKEND if b in (None, "auto") else b


def run(cfg: dict, command: str) -> RunResult:
    """Execute `command` on a resolved config, writing into cfg["out"]."""
    if command not in ("simulate", "regret", "lower-bound", "eqgap"):
        raise ConfigError(f"run() does not handle {command!r}")
    if command == "lower-bound" and "lower_bound" not in cfg:
        raise ConfigError("lower-bound needs a lower_bound section (try --preset lower-bound-linear)")
    if command == "eqgap" and "eqgap" not in cfg:
        raise ConfigError("eqgap needs an eqgap section (try --preset common-interest)")
    if command in ("simulate", "regret") and "lower_bound" not in cfg and cfg["cost"]["shared"]:
        raise ConfigError("a shared cost is only used by eqgap")
    backend = _backend(cfg)
    cfg = dict(cfg, backend=backend)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, MARKER)
    with open(marker, "w") as fh:
        fh.write(command + "\n")
    man = manifest(cfg, command, backend)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    res = RunResult(command=command, out=out, files=["manifest.json"])
    if command == "lower-bound" or (command == "regret" and "lower_bound" in cfg):
        _lower_bound(cfg, res)
    elif command == "regret":
        _regret(cfg, res)
    elif command == "simulate":
        _simulate(cfg, res)
    else:
        _eqgap(cfg, res)
    os.remove(marker)
    return res


# ---------------------------------------------------------------------------
# simulate


def _agents(cfg, T, trial):
    sys, Ks = build_system(cfg)
    gen = build_disturbance(cfg, trial)
    costs = build_costs(cfg, trial)
    a = cfg["agents"]
    confs = build_configs(sys, Ks, costs, T, settings=a["setting"], tuning=a["tuning"], c_eta=a["c_eta"],
                          U=cfg["U"], H=a["H"], eta=a["eta"], cert_override=a["cert_override"],
                          norm=a["norm"], N_guess=a["N_guess"])
    return sys, Ks, gen, costs, confs


def recovery_error(trace, sys) -> list:
    """Largest gap between each agent's recovered disturbance and its target identity."""
    out = []
    for i, s in enumerate(trace.settings):
        ref = trace.w if s == 2 else trace.w + trace.others_input(sys, i)
        out.append(float(np.max(np.abs(trace.w_est[i] - ref), initial=0.0)))
    return out


def _simulate_cell(cfg, T, trial, _seed=None):
    sys, Ks, gen, costs, confs = _agents(cfg, T, trial)
    tr = run_agents(sys, confs, costs, gen, T, backend=cfg["backend"])
    name = f"trace_T{T}_trial{trial}.csv"
    tr.to_csv(os.path.join(cfg["out"], "traces", name))
    rec = recovery_error(tr, sys)
    return [(T, trial, i, confs[i].setting, confs[i].H, confs[i].eta, float(tr.cost[i].sum()),
             float(np.linalg.norm(tr.x[-1])), rec[i], name) for i in range(sys.N)]


def _cells(fn, cfg):
    tasks = [(T, n) for T in cfg["T"] for n in range(cfg["trials"])]
    if cfg["jobs"] > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(cfg["jobs"]) as ex:
            return list(ex.map(functools.partial(_star, fn, cfg), tasks))
    return [fn(cfg, T, n) for T, n in tasks]


def _star(fn, cfg, task):
    return fn(cfg, *task)


def _simulate(cfg, res):
    os.makedirs(os.path.join(cfg["out"], "traces"), exist_ok=True)
    rows = [r for cell in _cells(_simulate_cell, cfg) for r in cell]
    write_csv(os.path.join(cfg["out"], "simulate.csv"),
              ["T", "trial", "agent", "setting", "H", "eta", "total_cost", "final_state_norm",
               "recovery_error", "trace_file"], rows)
    res.files += ["simulate.csv"] + [os.path.join("traces", r[-1]) for r in rows if r[2] == 0]
    worst = max(r[8] for r in rows)
    res.checks.append(Check("recovery", worst <= RECOVERY_TOL, f"max recovery error {worst:.3g}"))
    res.summary = [f"{len(rows)} agent-traces, max recovery error {worst:.3g}"]


# ---------------------------------------------------------------------------
# regret curves


def _regret_cell(cfg, T, trial, _seed=None):
    sys, Ks, gen, costs, confs = _agents(cfg, T, trial)
    tr = run_agents(sys, confs, costs, gen, T, backend=cfg["backend"])
    reg = cfg["regret"]
    out = []
    for i, c in enumerate(confs):
        held = held_mode(cfg, c.setting)
        H_start = min(c.H, T)
        if reg["comparator"] == "dac":
            r = dac_regret(tr, sys, i, costs[i], c.dac_set, c.K, H_start, solver={"restarts": reg["restarts"]},
                           seed=trial_seed(cfg["seed"], trial, 2), backend=cfg["backend"], held=held, K_list=Ks)
        else:
            kap, gam = c.certificate.kappa, c.certificate.gamma
            span = float(reg.get("span", 1.0))
            axes = [np.linspace(v - span, v + span, int(reg["grid"])) for v in np.ravel(c.K)]
            if int(reg["grid"]) ** len(axes) > 100_000:
                raise ConfigError("linear comparator grid exceeds 1e5 points; lower regret.grid")
            r = linear_regret(tr, sys, i, costs[i], axes, kap, gam, H_start, held=held, K_list=Ks)
        r.diagnostics.update(H=c.H, eta=c.eta, recovery_error=recovery_error(tr, sys)[i])
        out.append(r)
    return out


def _regret(cfg, res):
    cell = functools.partial(_regret_cell, cfg)
    curve = regret_curve(cell, cfg["T"], cfg["trials"], seed=cfg["seed"], jobs=cfg["jobs"])
    rows = [(T, n, r.agent, r.comparator, r.diagnostics["H"], r.diagnostics["eta"], r.H_start, r.realized_full,
             r.comparator_full, r.regret_full, r.realized_post, r.comparator_post, r.regret_post,
             r.diagnostics.get("held", ""), r.diagnostics["recovery_error"]) for T, n, r in curve.rows]
    write_csv(os.path.join(cfg["out"], "regret.csv"),
              ["T", "trial", "agent", "comparator", "H", "eta", "H_start", "realized_full", "comparator_full",
               "regret_full", "realized_post", "comparator_post", "regret_post", "held", "recovery_error"], rows)
    srows = [(T, m, s, p, m / math.sqrt(T)) for T, m, s, p in zip(curve.Ts, curve.mean, curve.stderr,
                                                                     curve.mean_post_pos)]
    write_csv(os.path.join(cfg["out"], "summary.csv"),
              ["T", "mean_regret", "stderr", "mean_post_regret_pos", "mean_regret_over_sqrtT"], srows)
    write_csv(os.path.join(cfg["out"], "slope.csv"), ["quantity", "loglog_slope"],
              [("mean_regret", curve.slope), ("mean_post_regret_pos", curve.slope_post)])
    res.files += ["regret.csv", "summary.csv", "slope.csv"]
    res.summary = [f"{'T':>8} {'mean regret':>14} {'stderr':>12} {'post (pos)':>14}"]
    res.summary += [f"{T:>8} {m:>14.6g} {s:>12.4g} {p:>14.6g}" for T, m, s, p, _ in srows]
    res.summary.append(f"slope {_s(curve.slope)}  post slope {_s(curve.slope_post)}")
    limits = cfg["check"].get("slope_max")
    if limits:
        setting = cfg["agents"]["setting"]
        setting = setting[0] if isinstance(setting, list) else setting
        lim = float(limits[str(setting)] if isinstance(limits, dict) else limits)
        for name, val in (("slope", curve.slope), ("post_slope", curve.slope_post)):
            ok = val is not None and val <= lim
            res.checks.append(Check(name, ok, f"{_s(val)} (limit {lim})"))
    worst = max(r[-1] for r in rows)
    res.checks.append(Check("recovery", worst <= RECOVERY_TOL, f"max recovery error {worst:.3g}"))
    return curve


def _s(v):
    return "n/a" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------------------
# lower bound


def _lower_bound(cfg, res):
    lb = cfg["lower_bound"]
    rep = lower_bound_experiment(lb["kind"], cfg["T"], cfg["trials"], seed=cfg["seed"], agent=lb["agent"],
                                 H=lb["H"], c_eta=lb["c_eta"], kappa=lb["kappa"], gamma=lb["gamma"], x0=lb["x0"],
                                 grid_points=lb["grid_points"], backend=cfg["backend"])
    rows = list(zip(rep.Ts, rep.mean_regret, rep.stderr, rep.ratio, rep.mean_cost_per_round))
    write_csv(os.path.join(cfg["out"], "lower_bound.csv"),
              ["T", "mean_regret", "stderr", "ratio", "mean_cost_per_round"], rows)
    write_csv(os.path.join(cfg["out"], "lower_bound_trials.csv"), ["T", "trial", "regret"],
              [(T, n, v) for T in rep.Ts for n, v in enumerate(rep.per_trial[T])])
    res.files += ["lower_bound.csv", "lower_bound_trials.csv"]
    res.summary = [f"{'T':>8} {'mean regret':>14} {'stderr':>12} {'regret/sqrtT':>14} {'cost/round':>12}"]
    res.summary += [f"{T:>8} {m:>14.6g} {s:>12.4g} {r:>14.6g} {c:>12.6g}" for T, m, s, r, c in rows]
    chk = cfg["check"]
    if "ratio_range" in chk:
        lo, hi = chk["ratio_range"]
        ok = bool(np.all((rep.ratio >= lo) & (rep.ratio <= hi)))
        res.checks.append(Check("ratio_range", ok, f"ratios {np.round(rep.ratio, 4).tolist()} in [{lo}, {hi}]"))
    if "ratio_spread" in chk:
        r = rep.ratio
        spread = float(r.max() / r.min()) if np.all(r > 0) else math.inf
        res.checks.append(Check("ratio_spread", spread <= chk["ratio_spread"],
                                f"max/min {spread:.4g} (limit {chk['ratio_spread']})"))
    if "cost_per_round" in chk:
        c0, tol = chk["cost_per_round"]
        dev = float(np.max(np.abs(rep.mean_cost_per_round - c0)))
        res.checks.append(Check("cost_per_round", dev <= tol, f"max deviation {dev:.4g} from {c0} (tol {tol})"))
    return rep


# ---------------------------------------------------------------------------
# equilibrium gaps


def _eqgap(cfg, res):
    sys, Ks = build_system(cfg)
    eq = cfg["eqgap"]
    reports = []
    rows = []
    for T in cfg["T"]:
        for n in range(cfg["trials"]):
            gen = build_disturbance(cfg, n)
            cost = build_costs(cfg, n)
            if isinstance(cost, list):
                raise ConfigError("eqgap needs cost.shared: true")
            rep = eqgap_run(sys, Ks, cost, gen, T, H=eq["H"], eta=eq["eta"], stride=eq["stride"], x0=eq["x0"],
                            smooth_samples=eq["smooth_samples"], seed=trial_seed(cfg["seed"], n, 3),
                            eps_br=eq["eps_br"], br_iters=eq["br_iters"])
            name = f"eqgap_T{T}_trial{n}.csv"
            rep.to_csv(os.path.join(cfg["out"], name))
            res.files.append(name)
            lhs, rhs = rep.prop_d1()
            rows.append((T, n, rep.H, rep.eta, rep.L_hat, rep.stride, rep.avg_eqgap_sq, rep.path_length,
                         2 * rep.eta * float(np.sum(rep.loss_drop)), path_length_check(rep, cfg["check"].get("path_tol", 1e-8)),
                         float(rep.delta_cost.sum()), float(rep.dist_variation.sum()), lhs, rhs, rep.d4_violations, rep.solver_failures))
            reports.append(rep)
    write_csv(os.path.join(cfg["out"], "eqgap_summary.csv"),
              ["T", "trial", "H", "eta", "L_hat", "stride", "avg_eqgap_sq", "path_length", "path_rhs",
               "path_check", "delta_cost_sum", "dist_variation_sum", "d1_lhs", "d1_rhs", "d4_violations",
               "solver_failures"], rows)
    res.files.append("eqgap_summary.csv")
    res.summary = [f"{'T':>8} {'avg EQGAP^2':>14} {'path':>12} {'2*eta*drop':>12} {'D.1 lhs':>12} {'D.1 rhs':>12}"]
    res.summary += [f"{r[0]:>8} {r[6]:>14.6g} {r[7]:>12.4g} {r[8]:>12.4g} {r[12]:>12.4g} {r[13]:>12.4g}" for r in rows]
    chk = cfg["check"]
    res.checks.append(Check("path_length", all(r[9] for r in rows), "path-length inequality on every run"))
    if cfg["disturbance"]["kind"] == "constant-vector" and not isinstance(cfg["cost"]["target_x"], dict):
        zero = all(r[10] == 0 and r[11] == 0 for r in rows)
        res.checks.append(Check("static_ledgers", zero, "cost-variation and disturbance-variation sums are 0"))
    if "eqgap_decay" in chk and len(cfg["T"]) > 1:
        by_T = {}
        for r in rows:
            by_T.setdefault(r[0], []).append(r[6])
        first, last = np.mean(by_T[cfg["T"][0]]), np.mean(by_T[cfg["T"][-1]])
        ratio = last / first if first > 0 else math.inf
        res.checks.append(Check("eqgap_decay", ratio <= chk["eqgap_decay"],
                                f"avg EQGAP^2 ratio {ratio:.4g} (limit {chk['eqgap_decay']})"))
    return reports


# ---------------------------------------------------------------------------
# tune


def tune(rule, N, kappa, gamma, T, c_eta=1.0, G=None, W=None, U=1.0, maxB=None):
    """(H, eta) from one of the tuning rules; thm31 also needs G, W and maxB."""
    if rule == "thm33":
        t = tune_setting2(N, kappa, gamma, T, c_eta)
    elif rule == "thm34":
        t = tune_setting2_lipschitz(N, kappa, gamma, T, c_eta)
    elif rule == "thm31":
        if G is None or W is None or maxB is None:
            raise ConfigError("thm31 needs G, W and maxB")
        t = tune_setting1(G, W, N, U, maxB, kappa, gamma, T, c_eta)
    else:
        raise ConfigError(f"no rule to tune for {rule!r}")
    return {"rule": rule, "H": t.H, "eta": t.eta, "W_tilde": t.W_tilde}


def tune_from_config(cfg, T):
    """Per-agent (H, eta) that a run at horizon T would use."""
    sys, Ks = build_system(cfg)
    a = cfg["agents"]
    costs = build_costs(cfg, 0)
    if not isinstance(costs, list):
        costs = [costs] * sys.N
    confs = build_configs(sys, Ks, costs, T, settings=a["setting"], tuning=a["tuning"], c_eta=a["c_eta"],
                          U=cfg["U"], H=a["H"], eta=a["eta"], cert_override=a["cert_override"], norm=a["norm"],
                          N_guess=a["N_guess"])
    return [{"agent": c.index, "setting": c.setting, "H": c.H, "eta": c.eta, "kappa": c.certificate.kappa,
             "gamma": c.certificate.gamma} for c in confs], max_norm(sys.B)
