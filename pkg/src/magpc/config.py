"""Experiment configuration: loading, presets, resolution to a concrete manifest, object builders."""

from __future__ import annotations

import copy
import csv
import json
import math
import os

import numpy as np
import yaml

from .costs import LinearCost, QuadraticTracking
from .errors import ConfigError
from .lds import DISTURBANCE_KINDS, DisturbanceGenerator, LdsSystem
from .stability import synthesize, synthesize_joint

COMMANDS = ("simulate", "regret", "lower-bound", "eqgap", "certify", "tune")
COST_FAMILIES = ("quadratic-tracking", "linear")
HELD_CHOICES = ("auto", "controls", "policies")


def _rot(theta):
    return [[math.cos(theta)], [math.sin(theta)]]


def _powers(lo, hi):
    return [2 ** k for k in range(lo, hi + 1)]


# Each preset is a partial config; `resolve` fills in everything else.
PRESETS = {
    "tracking": {
        "scenario": "tracking",
        "system": {"A": [[0.6, 0.8], [0.0, 0.4]],
                   "B": [_rot(2 * math.pi * i / 3 + 0.2) for i in range(3)], "B_scale": 0.5, "W": 1.0},
        "cost": {"family": "quadratic-tracking", "lam": 0.5,
                 "target_x": {"kind": "sinusoidal", "amplitude": [0.5, 0.5], "frequency": 0.05,
                              "random_phase": True}},
        "disturbance": {"kind": "sinusoidal", "amplitude": [0.6, 0.5], "frequency": [0.1, 0.23],
                        "random_phase": True},
        "agents": {"setting": 2, "tuning": "thm33", "K": "synthesize-joint"},
        "T": _powers(8, 14), "trials": 20,
        "check": {"slope_max": {"1": 0.70, "2": 0.65}},
    },
    "scalar-duopoly": {
        # two harvesters drawing down one renewable stock that grows 5% per round
        "scenario": "scalar-duopoly",
        "system": {"A": [[1.05]], "B": [[[-0.6]], [[-0.4]]], "W": 0.5},
        "cost": {"family": "quadratic-tracking", "lam": 0.2, "target_x": [1.0]},
        "disturbance": {"kind": "clipped-gaussian", "sigma": 0.2, "clip": 0.5},
        "agents": {"setting": 2, "tuning": "thm33", "K": "synthesize-joint"},
        "T": [256, 1024, 4096], "trials": 4,
    },
    "formation-toy": {
        # two lightly anchored carts on a line, each pushing its own velocity; targets are formation slots
        "scenario": "formation-toy",
        "system": {"A": [[0.98, 0.2, 0.0, 0.0], [0.0, 0.9, 0.0, 0.0],
                         [0.0, 0.0, 0.98, 0.2], [0.0, 0.0, 0.0, 0.9]],
                   "B": [[[0.0], [0.2], [0.0], [0.0]], [[0.0], [0.0], [0.0], [0.2]]], "W": 0.3},
        "cost": {"family": "quadratic-tracking", "lam": 0.1, "target_x": [1.0, 0.0, -1.0, 0.0]},
        "disturbance": {"kind": "sinusoidal", "amplitude": [0.0, 0.2, 0.0, 0.2], "frequency": [0.0, 0.07, 0.0, 0.11],
                        "random_phase": True},
        "agents": {"setting": 2, "tuning": "thm33", "K": "synthesize-joint"},
        "T": [256, 1024], "trials": 2,
    },
    "grid-toy": {
        # frequency deviation and tie-line flow regulated by three generators under demand shocks
        "scenario": "grid-toy",
        "system": {"A": [[0.95, 0.1], [-0.1, 0.9]],
                   "B": [[[0.4], [0.0]], [[0.2], [0.3]], [[0.0], [0.5]]], "W": 0.4},
        "cost": {"family": "quadratic-tracking", "lam": 0.3, "target_x": [0.0, 0.0]},
        "disturbance": {"kind": "sign-switching", "value": [0.3, 0.1], "period": 25, "probability": 0.5},
        "agents": {"setting": 2, "tuning": "thm33", "K": "synthesize-joint"},
        "T": [256, 1024, 4096], "trials": 4,
    },
    "common-interest": {
        "scenario": "common-interest",
        "system": {"A": [[0.6, 0.8], [0.0, 0.4]], "B": [[[1.0], [0.0]], [[0.3], [1.0]]], "W": 1.0},
        "cost": {"family": "quadratic-tracking", "lam": 0.5, "target_x": [1.0, 0.5], "shared": True},
        "disturbance": {"kind": "constant-vector", "value": [0.5, -0.3]},
        "agents": {"setting": 2, "tuning": "manual", "K": "synthesize-joint"},
        "eqgap": {"H": 5},
        "T": [1024, 4096], "trials": 1,
        "check": {"eqgap_decay": 0.6, "path_tol": 1e-8},
    },
    "lower-bound-linear": {
        "scenario": "lower-bound-linear",
        "system": {"A": [[0.0]], "B": [[[0.5]]], "W": 1.0},
        "lower_bound": {"kind": "linear"},
        "T": [100, 1000, 10000], "trials": 200,
        "check": {"ratio_range": [0.05, 5.0], "ratio_spread": 2.0, "cost_per_round": [0.5, 0.01]},
    },
    "lower-bound-dac": {
        "scenario": "lower-bound-dac",
        "system": {"A": [[0.0]], "B": [[[1.0]]], "W": 1.0},
        "lower_bound": {"kind": "dac"},
        "T": [100, 1000, 10000], "trials": 200,
        "check": {"ratio_range": [0.05, 5.0], "ratio_spread": 2.0},
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def load(path) -> dict:
    """Read a YAML or JSON config. A manifest written by the runner is accepted as-is."""
    try:
        with open(path) as fh:
            text = fh.read()
        try:
            # YAML 1.1 reads exponent floats such as 1e-07 as strings, so JSON goes through json
            raw = json.loads(text)
        except ValueError:
            raw = yaml.safe_load(text)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if "config" in raw and "version" in raw:
        raw = raw["config"]
    base = raw.pop("preset", None)
    if base is not None:
        merged = preset(base)
        _merge(merged, raw)
        raw = merged
    sysd = raw.get("system", {})
    if isinstance(sysd, dict) and "matrix_file" in sysd:
        mf = sysd["matrix_file"]
        if not os.path.isabs(mf):
            sysd["matrix_file"] = os.path.join(os.path.dirname(os.path.abspath(path)), mf)
    return raw


def _merge(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def read_matrix_file(path) -> dict:
    """Labeled CSV rows: the first field names the matrix (A, B1, K2, W, ...), the rest is one row of it.

    Consecutive rows with the same label stack into a matrix; blank lines and lines starting
    with '#' are skipped.
    """
    mats = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read matrix file {path}: {exc}") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            row = [c.strip() for c in row]
            if not row or not row[0] or row[0].startswith("#"):
                continue
            label = row[0]
            try:
                vals = [float(c) for c in row[1:] if c != ""]
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
            if not vals:
                raise ConfigError(f"{path}:{lineno}: row for {label} has no numbers")
            mats.setdefault(label, []).append(vals)
    out = {}
    for label, rows in mats.items():
        if len({len(r) for r in rows}) != 1:
            raise ConfigError(f"{path}: rows of {label} have different lengths")
        out[label] = rows
    if "A" not in out:
        raise ConfigError(f"{path}: no A rows")
    return out


def _indexed(mats, prefix):
    keys = sorted((k for k in mats if k.startswith(prefix) and k[len(prefix):].isdigit()),
                  key=lambda k: int(k[len(prefix):]))
    return [mats[k] for k in keys]


def system_from_matrices(mats: dict) -> dict:
    Bs = _indexed(mats, "B")
    if not Bs:
        raise ConfigError("matrix file needs at least one B1 block")
    out = {"A": mats["A"], "B": Bs}
    if "W" in mats:
        out["W"] = float(mats["W"][0][0])
    Ks = _indexed(mats, "K")
    if Ks:
        if len(Ks) != len(Bs):
            raise ConfigError("give either no K blocks or one per B block")
        out["K"] = Ks
    return out


def trial_seed(master: int, trial: int, stream: int = 0) -> int:
    """Independent 32-bit seed for (trial, stream), derived from the master seed."""
    return int(np.random.SeedSequence([int(master), int(trial), int(stream)]).generate_state(1)[0])


def _int_list(v, name):
    if isinstance(v, str):
        v = [p for p in v.split(",") if p.strip()]
    if np.isscalar(v):
        v = [v]
    try:
        out = [int(float(x)) for x in v]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be integers: {exc}") from exc
    if not out or any(x < 1 for x in out):
        raise ConfigError(f"{name} must be positive integers")
    return out


def resolve(raw: dict, overrides: dict | None = None) -> dict:
    """Fill defaults, apply CLI overrides and validate. Pure: the same input gives the same output.

    The result holds only JSON types and inlines every matrix, so it reproduces the run on its own.
    """
    cfg = copy.deepcopy(raw)
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in ("T", "trials", "seed", "out", "jobs"):
        if key in ov:
            cfg[key] = ov[key]
    agents = cfg.setdefault("agents", {})
    if "setting" in ov:
        agents["setting"] = int(ov["setting"])
        if "tuning" not in ov:
            agents["tuning"] = {1: "thm31", 2: "thm33"}[agents["setting"]] \
                if agents.get("tuning", "thm33") != "manual" else "manual"
    if "tuning" in ov:
        agents["tuning"] = ov["tuning"]

    sysd = dict(cfg.get("system") or {})
    if "matrix_file" in sysd:
        sysd.update(system_from_matrices(read_matrix_file(sysd.pop("matrix_file"))))
    if "matrix_file" in ov:
        sysd.update(system_from_matrices(read_matrix_file(ov["matrix_file"])))
    if "A" not in sysd or "B" not in sysd:
        raise ConfigError("system needs A and B (inline, via matrix_file, or from a preset)")
    try:
        A = np.array(sysd["A"], dtype=float)
        scale = float(sysd.pop("B_scale", 1.0))
        Bs = [scale * np.array(b, dtype=float) for b in sysd["B"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad system matrices: {exc}") from exc
    for b in Bs:
        if b.ndim == 1:
            raise ConfigError("each B block must be a 2-D array (d rows)")
    W = float(sysd.get("W", 1.0))
    LdsSystem(A, Bs, W=W)  # shape and bound validation
    d, N = A.shape[0], len(Bs)
    system = {"A": A.tolist(), "B": [b.tolist() for b in Bs], "W": W}

    cost = dict(cfg.get("cost") or {})
    cost.setdefault("family", "quadratic-tracking")
    if cost["family"] not in COST_FAMILIES:
        raise ConfigError(f"cost family must be one of {COST_FAMILIES}")
    cost.setdefault("lam", 1.0)
    cost.setdefault("target_x", None)
    cost.setdefault("target_u", None)
    cost.setdefault("shared", False)
    if cost["family"] == "linear":
        cost.setdefault("g_x", [0.0] * d)
        cost.setdefault("g_u", [[0.0] * b.shape[1] for b in Bs])
    for key in ("target_x",):
        tgt = cost[key]
        if isinstance(tgt, dict):
            _check_gen(tgt, d, 1.0 + np.linalg.norm(np.atleast_1d(tgt.get("amplitude", 1.0))))
        elif tgt is not None and np.asarray(tgt, float).shape != (d,):
            raise ConfigError(f"cost.target_x must have length {d}")

    dist = dict(cfg.get("disturbance") or {"kind": "constant-vector", "value": [0.0] * d})
    _check_gen(dist, d, W)

    setting = agents.setdefault("setting", 2)
    settings = [int(s) for s in (setting if isinstance(setting, list) else [setting] * N)]
    if len(settings) != N or any(s not in (1, 2) for s in settings):
        raise ConfigError("agents.setting must be 1 or 2 (or a list with one entry per agent)")
    agents.setdefault("tuning", "thm33" if settings[0] == 2 else "thm31")
    tun = agents["tuning"]
    tunings = tun if isinstance(tun, list) else [tun] * N
    for s, r in zip(settings, tunings):
        if r not in ("thm31", "thm33", "thm34", "manual"):
            raise ConfigError(f"unknown tuning rule {r!r}")
        if (s == 1 and r in ("thm33", "thm34")) or (s == 2 and r == "thm31"):
            raise ConfigError(f"tuning {r} does not apply to setting {s}")
    agents.setdefault("c_eta", 1.0)
    agents.setdefault("H", None)
    agents.setdefault("eta", None)
    agents.setdefault("norm", "spectral")
    agents.setdefault("cert_override", None)
    agents.setdefault("N_guess", None)
    if "manual" in tunings and cfg.get("eqgap") is None and (agents["H"] is None or agents["eta"] is None):
        raise ConfigError("manual tuning needs agents.H and agents.eta")
    Ksrc = sysd["K"] if "K" in sysd else agents.get("K", "synthesize-joint")
    if isinstance(Ksrc, str):
        if Ksrc not in ("synthesize", "synthesize-joint"):
            raise ConfigError("agents.K must be 'synthesize', 'synthesize-joint' or explicit matrices")
    else:
        Ks = [np.array(k, dtype=float) for k in Ksrc]
        if len(Ks) != N or any(k.shape != (b.shape[1], d) for k, b in zip(Ks, Bs)):
            raise ConfigError("explicit K must be one (k_i, d) matrix per agent")
        Ksrc = [k.tolist() for k in Ks]
    agents["K"] = Ksrc

    out = {
        "scenario": str(cfg.get("scenario", "custom")),
        "system": system, "cost": cost, "disturbance": dist, "agents": agents,
        "T": _int_list(cfg.get("T", [1000]), "T"),
        "trials": _int_list(cfg.get("trials", 1), "trials")[0],
        "seed": int(cfg.get("seed", 0)),
        "U": float(cfg.get("U", 1.0)),
        "out": str(cfg.get("out", os.path.join("runs", str(cfg.get("scenario", "custom"))))),
        "jobs": _int_list(cfg.get("jobs", 1), "jobs")[0],
        "backend": str(ov.get("backend", cfg.get("backend", "auto"))),
    }
    if out["backend"] not in ("auto", "compiled", "python"):
        raise ConfigError("backend must be auto, compiled or python")
    reg = dict(cfg.get("regret") or {})
    reg.setdefault("comparator", "dac")
    reg.setdefault("held", "auto")
    reg.setdefault("restarts", 1)
    reg.setdefault("grid", 21)
    if reg["comparator"] not in ("dac", "linear"):
        raise ConfigError("regret.comparator must be 'dac' or 'linear'")
    if reg["held"] not in HELD_CHOICES:
        raise ConfigError(f"regret.held must be one of {HELD_CHOICES}")
    out["regret"] = reg
    if cfg.get("lower_bound") is not None:
        lb = dict(cfg["lower_bound"])
        lb.setdefault("kind", "linear")
        if lb["kind"] not in ("linear", "dac"):
            raise ConfigError("lower_bound.kind must be 'linear' or 'dac'")
        for k, v in (("H", 2), ("c_eta", 1.0), ("agent", "gpc"), ("kappa", 1.0), ("gamma", 0.5),
                     ("x0", 1.0), ("grid_points", 101)):
            lb.setdefault(k, v)
        out["lower_bound"] = _numbers(lb, floats=("c_eta", "kappa", "gamma", "x0"), ints=("H", "grid_points"),
                                      where="lower_bound")
    if cfg.get("eqgap") is not None:
        eq = dict(cfg["eqgap"])
        for k, v in (("H", 5), ("eta", None), ("stride", None), ("smooth_samples", 64), ("x0", None),
                     ("eps_br", 1e-7), ("br_iters", 10_000)):
            eq.setdefault(k, v)
        out["eqgap"] = _numbers(eq, floats=("eta", "eps_br"), ints=("H", "stride", "smooth_samples", "br_iters"),
                                where="eqgap")
    out["check"] = dict(cfg.get("check") or {})
    return json.loads(json.dumps(out))


def _numbers(sec, floats=(), ints=(), where=""):
    """Coerce numeric fields; YAML 1.1 leaves exponent literals like 1e-7 as strings."""
    for keys, kind in ((floats, float), (ints, int)):
        for k in keys:
            if sec.get(k) is not None:
                try:
                    sec[k] = kind(float(sec[k])) if kind is int else float(sec[k])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{where}.{k} must be a number, got {sec[k]!r}") from exc
    return sec


def _check_gen(spec, d, W):
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("generator spec needs a 'kind'")
    if spec["kind"] not in DISTURBANCE_KINDS:
        raise ConfigError(f"unknown generator kind {spec['kind']!r}")
    params = {k: v for k, v in spec.items() if k != "kind"}
    DisturbanceGenerator(spec["kind"], d, W, seed=0, **params)


# ---------------------------------------------------------------------------
# builders (resolved config -> objects)


def build_system(cfg: dict):
    s = cfg["system"]
    sys = LdsSystem(np.array(s["A"], float), [np.array(b, float) for b in s["B"]], W=s["W"])
    K = cfg["agents"]["K"]
    if K == "synthesize-joint":
        Ks = synthesize_joint(sys.A, sys.B)
    elif K == "synthesize":
        Ks = [synthesize(sys.A, b) for b in sys.B]
    else:
        Ks = [np.array(k, float) for k in K]
    return sys, [np.asarray(k, float) for k in Ks]


def build_disturbance(cfg: dict, trial: int) -> DisturbanceGenerator:
    spec = dict(cfg["disturbance"])
    kind = spec.pop("kind")
    return DisturbanceGenerator(kind, len(cfg["system"]["A"]), cfg["system"]["W"],
                                seed=trial_seed(cfg["seed"], trial, 0), **spec)


def build_costs(cfg: dict, trial: int):
    """One oracle per agent; a single shared oracle (joint control) when cost.shared is set."""
    c = cfg["cost"]
    d = len(cfg["system"]["A"])
    ks = [len(b[0]) for b in cfg["system"]["B"]]
    tgt = c["target_x"]
    if isinstance(tgt, dict):
        spec = dict(tgt)
        kind = spec.pop("kind")
        amp = np.linalg.norm(np.atleast_1d(spec.get("amplitude", 1.0)))
        tgt = DisturbanceGenerator(kind, d, max(amp, 1e-12) * (1 + 1e-9), seed=trial_seed(cfg["seed"], trial, 1),
                                   **spec)
    if c["family"] == "linear":
        if c["shared"]:
            return LinearCost(c["g_x"], np.concatenate([np.atleast_1d(g) for g in c["g_u"]]))
        return [LinearCost(c["g_x"], g) for g in c["g_u"]]
    if c["shared"]:
        return QuadraticTracking(d, sum(ks), c["lam"], target_x=tgt, target_u=c["target_u"])
    tu = c["target_u"]
    return [QuadraticTracking(d, k, c["lam"], target_x=tgt, target_u=None if tu is None else tu[i])
            for i, k in enumerate(ks)]


def held_mode(cfg: dict, setting: int) -> str:
    h = cfg["regret"]["held"]
    if h != "auto":
        return h
    return "policies" if setting == 2 else "controls"
