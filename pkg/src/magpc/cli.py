"""magpc command line."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from . import config as cfgmod
from . import runner
from .errors import ConfigError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", help="YAML/JSON experiment file, or a manifest.json to rerun")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--matrix-file", help="labeled CSV with A, B1.., optional K1.. and W rows")
    p.add_argument("--T", help="horizon or comma-separated horizon grid")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--setting", type=int, choices=(1, 2))
    p.add_argument("--tuning", choices=("thm31", "thm33", "thm34", "manual"))
    p.add_argument("--backend", choices=("auto", "compiled", "python"))
    p.add_argument("--check", action="store_true", help="exit 4 when an acceptance threshold fails")


def parser():
    p = argparse.ArgumentParser(prog="magpc", description="Multi-agent gradient-perturbation control experiments.")
    p.add_argument("--version", action="version", version=f"magpc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "run the agents and write traces"),
                       ("regret", "regret curves over a horizon grid"),
                       ("lower-bound", "the scalar lower-bound instances"),
                       ("eqgap", "equilibrium gaps in the common-interest game"),
                       ("certify", "strong-stability certificates for a system")):
        _common(sub.add_parser(name, help=text))
    t = sub.add_parser("tune", help="memory length and step size from a tuning rule")
    _common(t)
    for flag in ("--kappa", "--gamma", "--G", "--W", "--U", "--maxB", "--c-eta"):
        t.add_argument(flag, type=float)
    t.add_argument("--N", type=int)
    return p


def load_config(args) -> dict:
    if args.config:
        raw = cfgmod.load(args.config)
    elif args.preset:
        raw = cfgmod.preset(args.preset)
    elif args.matrix_file:
        raw = {"scenario": "matrix-file"}
    else:
        raise ConfigError("give --config, --preset or --matrix-file")
    if args.config and args.preset:
        merged = cfgmod.preset(args.preset)
        cfgmod._merge(merged, raw)
        raw = merged
    ov = {"T": args.T, "trials": args.trials, "seed": args.seed, "jobs": args.jobs, "out": args.out,
          "setting": args.setting, "tuning": args.tuning, "matrix_file": args.matrix_file,
          "backend": args.backend}
    return cfgmod.resolve(raw, ov)


def _print_cert(tag, c):
    if "error" in c:
        print(f"{tag}: not certified ({c['error']})")
        return
    print(f"{tag}: kappa={c['kappa']:.17g} gamma={c['gamma']:.17g} spectral_radius={c['spectral_radius']:.17g} "
          f"K_norm={c['K_norm']:.17g} residual={c['residual']:.3g}")


def cmd_certify(args, cfg):
    certs = runner.certificates(cfg)
    for i, k in enumerate(certs["K"]):
        print(f"K{i + 1} = {np.array2string(np.array(k), precision=6, separator=', ')}")
    for c in certs["agents"]:
        _print_cert(f"agent {c['agent']}", c)
    _print_cert("global", certs["global"])
    if args.out:
        import os
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "certificates.json"), "w") as fh:
            json.dump(certs, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_tune(args, cfg):
    Ts = [int(float(x)) for x in str(args.T).split(",")] if args.T else None
    if args.kappa is not None or args.gamma is not None:
        need = {"--kappa": args.kappa, "--gamma": args.gamma, "--N": args.N, "--T": Ts}
        missing = [k for k, v in need.items() if v is None]
        if missing:
            raise ConfigError(f"tune with explicit constants needs {', '.join(missing)}")
        rule = args.tuning or "thm33"
        for T in Ts:
            out = runner.tune(rule, args.N, args.kappa, args.gamma, T, c_eta=args.c_eta or 1.0, G=args.G, W=args.W,
                              U=args.U if args.U is not None else 1.0, maxB=args.maxB)
            extra = "" if out["W_tilde"] is None else f" W_tilde={out['W_tilde']:.17g}"
            print(f"T={T} rule={rule} H={out['H']} eta={out['eta']:.17g}{extra}")
        return EXIT_OK
    if cfg is None:
        raise ConfigError("give --kappa/--gamma/--N/--T or a config")
    for T in cfg["T"]:
        rows, _ = runner.tune_from_config(cfg, T)
        for r in rows:
            print(f"T={T} agent={r['agent']} setting={r['setting']} H={r['H']} eta={r['eta']:.17g} "
                  f"kappa={r['kappa']:.6g} gamma={r['gamma']:.6g}")
    return EXIT_OK


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        if args.command == "tune" and not (args.config or args.preset or args.matrix_file):
            return cmd_tune(args, None)
        cfg = load_config(args)
        if args.command == "certify":
            return cmd_certify(args, cfg)
        if args.command == "tune":
            return cmd_tune(args, cfg)
        res = runner.run(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for line in res.summary:
        print(line)
    for c in res.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    print(f"wrote {len(res.files)} files to {res.out}")
    if args.check and not res.passed:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
