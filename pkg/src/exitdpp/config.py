"""TOML run configuration.

Problem sections::

    [horizon]        T = 10.0
    [domain]         kind = "box" | "ball" | "halfspace" | "expression" + its parameters
    [coefficients]   b = ["0"], sigma = ["1"] (diagonal) or [["1","0"],["0","1"]], f = "1"
    [control_space]  optional; [[control_space.levels]] lower, upper, mesh

A file may instead name another file holding these sections with a
top-level ``problem = "path.toml"`` (relative to the config file).

Run sections: [run], [check], [grid], [estimate], [simulate], [verify],
[stitch], [cover]. Every key is checked against the schema below; unknown
keys and sections are errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .problem import ControlSpace, CoefficientSet, Domain, ProblemSpec
from .stopping import Constant, FirstHit

PROBLEM_SECTIONS = ("horizon", "domain", "coefficients", "control_space")

SCHEMA = {
    "": {"problem", "name"},
    "horizon": {"T", "envelope"},
    "domain": {"kind", "lower", "upper", "center", "radius", "normal", "offset", "phi",
               "lipschitz", "dim"},
    "coefficients": {"b", "sigma", "f"},
    "control_space": {"levels"},
    "control_space.levels": {"lower", "upper", "mesh"},
    "run": {"seed", "workers", "out"},
    "check": {"n_samples", "lipschitz_samples", "level"},
    "grid": {"n_nodes", "spacing", "n_steps", "level", "store_every", "max_slices", "lower",
             "upper", "truncation", "file"},
    "estimate": {"t", "x", "policy", "n_paths", "n_steps", "bridge", "f_max"},
    "simulate": {"t", "x", "policy", "n_steps", "path_index", "file"},
    "verify": {"t", "x", "n_paths", "n_steps", "n_random", "c_disc", "c_opt", "grid_scale",
               "rules"},
    "verify.rules": {"id", "kind", "s", "lower", "upper", "center", "radius"},
    "stitch": {"enabled", "theta", "radius", "pitch", "minorant_n", "n_paths", "t_lo", "t_hi",
               "x_lo", "x_hi"},
    "cover": {"t_lo", "t_hi", "x_lo", "x_hi", "radius", "pitch", "file"},
}


class ConfigError(ValueError):
    """Malformed configuration; ``location`` names the file and key."""

    def __init__(self, message, location=""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass
class RunConfig:
    path: Path
    spec: ProblemSpec
    seed: int
    workers: int = 1
    out: Path = Path("out")
    sections: dict = field(default_factory=dict)

    def section(self, name):
        return dict(self.sections.get(name, {}))


def _read(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(str(exc), str(path)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax: {exc}", str(path)) from exc


def _check_keys(data, where, path):
    for key, value in data.items():
        if isinstance(value, dict):
            name = f"{where}.{key}" if where else key
            if name not in SCHEMA:
                raise ConfigError(f"unknown section [{name}]", str(path))
            _check_keys(value, name, path)
        elif isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            name = f"{where}.{key}" if where else key
            if name not in SCHEMA:
                raise ConfigError(f"unknown table array [[{name}]]", str(path))
            for i, item in enumerate(value):
                for k in item:
                    if k not in SCHEMA[name]:
                        raise ConfigError(f"unknown key {k!r}", f"{path}:[[{name}]] #{i + 1}")
        elif key not in SCHEMA.get(where, ()):
            raise ConfigError(f"unknown key {key!r}", f"{path}:[{where or 'top level'}]")


def _need(section, key, where):
    if key not in section:
        raise ConfigError(f"missing key {key!r}", where)
    return section[key]


def _floats(value, where):
    try:
        return [float(v) for v in (value if isinstance(value, list) else [value])]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"expected numbers, got {value!r}", where) from exc


def parse_domain(sec, where, dim_hint=None):
    kind = _need(sec, "kind", where)
    if kind == "box":
        lo, hi = _floats(_need(sec, "lower", where), where), _floats(_need(sec, "upper", where), where)
        if len(lo) != len(hi):
            raise ConfigError("lower and upper differ in length", where)
        return Domain.box(lo, hi)
    if kind == "ball":
        return Domain.ball(_floats(_need(sec, "center", where), where),
                           float(_need(sec, "radius", where)))
    if kind == "halfspace":
        return Domain.halfspace(_floats(_need(sec, "normal", where), where),
                                float(_need(sec, "offset", where)))
    if kind == "expression":
        dim = int(sec.get("dim", dim_hint or 0))
        if dim < 1:
            raise ConfigError("expression domain needs 'dim'", where)
        lo = _floats(sec["lower"], where) if "lower" in sec else None
        hi = _floats(sec["upper"], where) if "upper" in sec else None
        return Domain.expression(str(_need(sec, "phi", where)), dim,
                                 float(sec.get("lipschitz", 1.0)), lo, hi)
    raise ConfigError(f"unknown domain kind {kind!r}", where + ".kind")


def parse_problem(data, path, name=""):
    for s in ("horizon", "domain", "coefficients"):
        if s not in data:
            raise ConfigError(f"missing section [{s}]", str(path))
    hz = data["horizon"]
    T = float(_need(hz, "T", f"{path}:[horizon]"))
    coef = data["coefficients"]
    where = f"{path}:[coefficients]"
    b, sigma, f = _need(coef, "b", where), _need(coef, "sigma", where), _need(coef, "f", where)
    b = [b] if isinstance(b, str) else list(b)
    domain = parse_domain(data["domain"], f"{path}:[domain]", len(b))
    levels, counts = [], []
    for i, lv in enumerate(data.get("control_space", {}).get("levels", [])):
        w = f"{path}:[[control_space.levels]] #{i + 1}"
        lo, hi = _floats(_need(lv, "lower", w), w), _floats(_need(lv, "upper", w), w)
        levels.append((lo, hi))
        counts.append([int(c) for c in (lv["mesh"] if isinstance(lv.get("mesh"), list)
                                        else [lv.get("mesh", 3)] * len(lo))])
    try:
        cs = ControlSpace.from_levels(levels, counts or None)
        cset = CoefficientSet(b, sigma, str(f), cs.dim)
    except ValueError as exc:  # ExpressionError, ProblemError
        raise ConfigError(str(exc), where) from exc
    return ProblemSpec(T, domain, cset, cs, envelope=float(hz.get("envelope", 10.0)), name=name)


def load(path, seed=None, workers=None, out=None):
    """Read a config file; ``seed``/``workers``/``out`` override [run]."""
    path = Path(path)
    data = _read(path)
    _check_keys(data, "", path)
    prob_data, prob_path = data, path
    if "problem" in data:
        prob_path = (path.parent / data["problem"]).resolve()
        prob_data = _read(prob_path)
        _check_keys(prob_data, "", prob_path)
    spec = parse_problem(prob_data, prob_path, str(data.get("name", prob_data.get("name", ""))))
    run = data.get("run", {})
    seed = run.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigError("missing key 'seed' (no wall-clock seeding)", f"{path}:[run]")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}", f"{path}:[run]")
    workers = int(run.get("workers", 1) if workers is None else workers)
    if workers < 1:
        raise ConfigError("workers must be >= 1", f"{path}:[run]")
    out = Path(run.get("out", "out") if out is None else out)
    sections = {k: v for k, v in data.items() if isinstance(v, dict) and k not in PROBLEM_SECTIONS}
    for name, sec in sections.items():
        for key in ("n_paths", "n_steps", "n_samples", "lipschitz_samples", "n_nodes"):
            v = sec.get(key)
            if v is not None and (np.any(np.asarray(v) <= 0)):
                raise ConfigError(f"{key} must be > 0", f"{path}:[{name}]")
    return RunConfig(path, spec, seed, workers, out, sections)


def parse_rules(cfg, spec, t):
    """Stopping rules of [verify]; default Constant(T/4), Constant(T/2) and
    FirstHit of the middle half of the domain's bounding box."""
    items = cfg.section("verify").get("rules")
    if items is None:
        lo, hi = spec.domain.bounds()
        lo = np.where(np.isfinite(lo), lo, -1.0)
        hi = np.where(np.isfinite(hi), hi, 1.0)
        mid, half = (lo + hi) / 2, (hi - lo) / 4
        return {"const_T/4": Constant(spec.T / 4), "const_T/2": Constant(spec.T / 2),
                "first_hit_mid": FirstHit(Domain.box(mid - half, mid + half))}
    rules = {}
    for i, item in enumerate(items):
        where = f"{cfg.path}:[[verify.rules]] #{i + 1}"
        kind = _need(item, "kind", where)
        rid = str(item.get("id", f"rule_{i + 1}"))
        if kind == "constant":
            rules[rid] = Constant(float(_need(item, "s", where)))
        elif kind == "first_hit":
            if "center" in item:
                rules[rid] = FirstHit(Domain.ball(_floats(item["center"], where),
                                                  float(_need(item, "radius", where))))
            else:
                rules[rid] = FirstHit(Domain.box(_floats(_need(item, "lower", where), where),
                                                 _floats(_need(item, "upper", where), where)))
        else:
            raise ConfigError(f"unknown rule kind {kind!r}", where)
    return rules


def point(sec, spec, where):
    t = float(sec.get("t", 0.0))
    x = _floats(sec.get("x", [0.0] * spec.d), where)
    if len(x) != spec.d or not (0 <= t <= spec.T) or not all(map(math.isfinite, x)):
        raise ConfigError(f"start point (t={t}, x={x}) does not fit the problem", where)
    return t, np.asarray(x)
