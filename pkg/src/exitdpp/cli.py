"""Command line front end: ``exitdpp {check,solve,estimate,simulate,verify,cover}``.

Exit codes: 0 success, 1 a failed check (validation violation, CFL
violation, failed DPP flag), 2 malformed configuration.

Every command writes ``meta.json`` (timestamps, runtime, worker count) next
to its results so that the result files themselves are reproducible byte
for byte from the config and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config, rng
from .dp import CFLError, AnisotropyError, SpaceGrid, ValueGrid, cfl_steps, extract_policy, solve
from .dpp import (ToleranceModel, build_cover, default_policies, lsc_minorant,
                  stitching_improvement_test, verify_dpp)
from .montecarlo import estimate_J
from .paths import BrownianPath, Feedback, TimeMesh, simulate, zero_policy
from .problem import estimate_lipschitz, validate
from .stopping import Constant


def _dump(obj, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _grid(cfg, spec):
    """Solve (or load) the value grid described by [grid]."""
    g = cfg.section("grid")
    if "file" in g:
        return ValueGrid.from_binary(cfg.path.parent / g["file"], spec.domain)
    bounds = None
    if "lower" in g or "upper" in g:
        bounds = (g["lower"], g["upper"])
    n_nodes = g.get("n_nodes")
    if n_nodes is None and "spacing" not in g:
        n_nodes = 101
    space = SpaceGrid.from_domain(spec.domain, n_nodes, g.get("spacing"), bounds,
                                  g.get("truncation", 10.0))
    level = g.get("level")
    n = g.get("n_steps") or cfl_steps(spec, space, level)
    mesh = TimeMesh(0.0, spec.T, int(n))
    return solve(spec, space, mesh, level, g.get("store_every"), g.get("max_slices", 2001))


def _policy(spec, choice, grid_fn):
    if choice in (None, "zero"):
        return zero_policy(spec.d, spec.m)
    if choice == "argmax":
        return extract_policy(grid_fn(), spec)
    if isinstance(choice, str):
        choice = [choice]
    return Feedback(list(choice), spec.d)


def _mc_mesh(spec, sec):
    return TimeMesh(0.0, spec.T, int(sec.get("n_steps", 1000)))


def cmd_check(cfg):
    sec = cfg.section("check")
    spec = cfg.spec
    report = validate(spec, int(sec.get("n_samples", 1000)), rng.derive_seed(cfg.seed, "check"))
    out = {"spec_hash": spec.spec_hash(), "violations": list(report.violations), "ok": report.ok}
    if report.ok:
        levels = [sec["level"]] if "level" in sec else range(1, spec.control_space.n_levels + 1)
        out["lipschitz"] = {}
        for lv in levels:
            k_lip, k_growth = estimate_lipschitz(spec, int(lv), int(sec.get("lipschitz_samples", 10000)),
                                                 rng.derive_seed(cfg.seed, "lipschitz"))
            out["lipschitz"][str(lv)] = {"K_lip": k_lip, "K_growth": k_growth}
    for v in report.violations:
        print(f"violation: {v}")
    print(json.dumps(out, sort_keys=True, indent=2))
    _dump(out, cfg.out / "check.json")
    return 0 if report.ok else 1


def cmd_solve(cfg):
    spec = cfg.spec
    t0 = time.perf_counter()
    try:
        grid = _grid(cfg, spec)
    except CFLError as exc:
        print(f"CFL violation: {exc}", file=sys.stderr)
        return 1
    except AnisotropyError as exc:
        print(f"unsupported diffusion: {exc}", file=sys.stderr)
        return 1
    cfg.out.mkdir(parents=True, exist_ok=True)
    grid.to_csv(cfg.out / "grid.csv")
    grid.to_binary(cfg.out / "grid.bin")
    meta = dict(grid.metadata)
    meta["v_at_origin"] = float(grid.evaluate(0.0, np.zeros(spec.d)))
    meta["runtime_s"] = time.perf_counter() - t0
    _dump(meta, cfg.out / "grid_meta.json")
    print(json.dumps(meta, sort_keys=True, indent=2))
    return 0


def cmd_estimate(cfg):
    spec = cfg.spec
    sec = cfg.section("estimate")
    t, x = config.point(sec, spec, f"{cfg.path}:[estimate]")
    policy = _policy(spec, sec.get("policy"), lambda: _grid(cfg, spec))
    est = estimate_J(spec, t, x, policy, _mc_mesh(spec, sec), int(sec.get("n_paths", 1000)),
                     rng.derive_seed(cfg.seed, "estimate"), bool(sec.get("bridge", False)),
                     workers=cfg.workers, f_max=float(sec.get("f_max", np.inf)))
    row = {"t": t, "x": x.tolist(), "policy": policy.describe(), **est.as_dict()}
    print(json.dumps(row, sort_keys=True))
    _dump(row, cfg.out / "estimate.json")
    return 0


def cmd_simulate(cfg):
    spec = cfg.spec
    sec = cfg.section("simulate")
    t, x = config.point(sec, spec, f"{cfg.path}:[simulate]")
    policy = _policy(spec, sec.get("policy"), lambda: _grid(cfg, spec))
    mesh = _mc_mesh(spec, sec)
    bp = BrownianPath.generate(mesh, spec.d, rng.derive_seed(cfg.seed, "simulate"),
                               int(sec.get("path_index", 0)))
    path = simulate(spec, t, x, policy, bp)
    target = cfg.out / sec.get("file", "path.csv")
    target.parent.mkdir(parents=True, exist_ok=True)
    path.to_csv(target)
    print(target)
    return 0


def _stitch_report(cfg, spec, grid, t, x, tol_model, mesh):
    sec = cfg.section("stitch")
    theta = float(sec.get("theta", spec.T / 2))
    radius = float(sec.get("radius", 0.1))
    lo, hi = spec.domain.bounds()
    region = (float(sec.get("t_lo", theta)), float(sec.get("t_hi", min(spec.T, theta + radius / 2))),
              sec.get("x_lo", lo.tolist()), sec.get("x_hi", hi.tolist()))
    cover = build_cover(region, lambda tt, xx: radius, sec.get("pitch"))
    argmax = extract_policy(grid, spec)
    level = grid.metadata.get("control_level", spec.control_space.n_levels)
    eps_decl = (tol_model.eps_disc(mesh.dt, float(np.max(grid.space.spacing)))
                + tol_model.eps_opt(spec.control_space.pitch(level)))
    phi = lsc_minorant(grid, int(sec.get("minorant_n", 20)))
    return stitching_improvement_test(
        spec, t, x, zero_policy(spec.d, spec.m), Constant(theta), cover, [argmax] * len(cover), phi,
        eps_decl, grid, int(sec.get("n_paths", 2000)), rng.derive_seed(cfg.seed, "stitch"), mesh,
        tol_model, level, cfg.workers)


def cmd_verify(cfg):
    spec = cfg.spec
    sec = cfg.section("verify")
    t, x = config.point(sec, spec, f"{cfg.path}:[verify]")
    try:
        grid = _grid(cfg, spec)
    except CFLError as exc:
        print(f"CFL violation: {exc}", file=sys.stderr)
        return 1
    scale = float(sec.get("grid_scale", 1.0))
    if scale != 1.0:
        grid.values = grid.values * scale
    tol_model = ToleranceModel(float(sec.get("c_disc", 2.0)), float(sec.get("c_opt", 0.05)))
    mesh = _mc_mesh(spec, sec)
    policies = default_policies(spec, grid, int(sec.get("n_random", 3)),
                                rng.derive_seed(cfg.seed, "policies"))
    rules = config.parse_rules(cfg, spec, t)
    rep = verify_dpp(spec, t, x, grid, policies, rules, int(sec.get("n_paths", 2000)),
                     rng.derive_seed(cfg.seed, "verify"), tol_model, mesh, workers=cfg.workers)
    out = {"config": str(cfg.path.name), "seed": cfg.seed, "dpp": rep.as_dict(),
           "grid": {k: grid.metadata[k] for k in sorted(grid.metadata)}, "grid_scale": scale}
    flags = dict(rep.flags)
    st = cfg.section("stitch")
    if st.get("enabled", bool(st)) and spec.m > 0:
        s = _stitch_report(cfg, spec, grid, t, x, tol_model, mesh)
        out["stitch"] = s
        flags.update({f"stitch_{k}": v for k, v in s["flags"].items()})
    out["flags"] = flags
    out["passed"] = all(flags.values())
    _dump(out, cfg.out / "report.json")
    for k, v in sorted(flags.items()):
        print(f"{k}: {'PASS' if v else 'FAIL'}")
    return 0 if out["passed"] else 1


def cmd_cover(cfg):
    spec = cfg.spec
    sec = cfg.section("cover")
    lo, hi = spec.domain.bounds()
    radius = float(sec.get("radius", 0.1))
    region = (float(sec.get("t_lo", 0.0)), float(sec.get("t_hi", spec.T)),
              sec.get("x_lo", lo.tolist()), sec.get("x_hi", hi.tolist()))
    cover = build_cover(region, lambda tt, xx: radius, sec.get("pitch"))
    out = {"region": [region[0], region[1], list(region[2]), list(region[3])],
           "cells": cover.describe()}
    _dump(out, cfg.out / sec.get("file", "cover.json"))
    print(f"{len(cover)} cells")
    return 0


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "estimate": cmd_estimate,
            "simulate": cmd_simulate, "verify": cmd_verify, "cover": cmd_cover}


def build_parser():
    p = argparse.ArgumentParser(prog="exitdpp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", type=Path)
        s.add_argument("--workers", type=int)
        s.add_argument("--seed", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        cfg = config.load(args.config, args.seed, args.workers, args.out)
        code = COMMANDS[args.command](cfg)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    _dump({"command": args.command, "started": started.isoformat(),
           "finished": datetime.now(timezone.utc).isoformat(),
           "runtime_s": time.perf_counter() - t0, "workers": cfg.workers, "exit_code": code,
           "version": __version__}, cfg.out / "meta.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
