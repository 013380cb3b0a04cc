"""Numerical checks of the dynamic programming principle.

Two inequalities are checked with explicit error budgets:

* upper bound: for every tested policy and stopping rule,
  ``E[int_t^theta f ds + v(theta, X_theta)] <= v(t, x)``;
* achievability: the best tested policy reaches ``v(t, x)`` up to the
  discretization allowance and its declared suboptimality.

The stitching test builds the composite control that follows a base policy
up to theta and then the near-optimal policy of the half-open cover cell that
contains ``(theta, X_theta)``, and checks the chain
``v(t,x) >= J(beta) >= E[int f + phi(theta, X_theta)] - 3 eps``
for a continuous minorant ``phi <= v``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import rng
from .dp import ValueGrid, extract_policy
from .montecarlo import BudgetError, estimate_conditional_J, estimate_J
from .paths import Feedback, Stitched, TimeMesh
from .stopping import Constant, Cover, FirstHit, HalfOpenCell, MinOf, StoppingRule, realize

__all__ = [
    "Constant", "Cover", "DppReport", "FirstHit", "HalfOpenCell", "LscMinorant", "MinOf",
    "StoppingRule", "ToleranceModel", "build_cover", "default_policies", "lsc_minorant",
    "realize_stopping", "stitch", "stitching_improvement_test", "verify_dpp",
]

ROW_BUDGET = 500_000_000  # paths x steps x rows per verify run (an upper bound on work)


@dataclass(frozen=True)
class ToleranceModel:
    """``eps_disc = c_disc * (sqrt(dt_mc) + dx_grid)``; ``eps_opt = c_opt * control pitch``.

    ``c_disc = 2.0`` was fixed from the uncontrolled exit problem on (-1, 1):
    grid-point exit monitoring there overshoots J by about
    ``1.17 sqrt(dt)``, which the allowance covers with margin.
    """

    c_disc: float = 2.0
    c_opt: float = 0.05

    def eps_disc(self, dt, dx):
        return self.c_disc * (math.sqrt(dt) + dx)

    def eps_opt(self, pitch):
        return self.c_opt * pitch

    def as_dict(self):
        return {"c_disc": self.c_disc, "c_opt": self.c_opt,
                "eps_disc": "c_disc * (sqrt(dt_mc) + dx_grid)", "eps_opt": "c_opt * control_pitch"}


def realize_stopping(rule, path, domain):
    """Mesh index of ``theta = rule ^ tau`` on a simulated path."""
    return realize(rule, path.states, path.mesh, domain, path.start_index)


# ---------------------------------------------------------------- policy family


def default_policies(spec, grid=None, n_random=3, seed=0):
    """Argmax table (if a grid is given), zero, +-sign(x1) and random tanh feedbacks.

    Random feedback component j is ``a*tanh(b*x1 + c*t + e)`` with
    coefficients drawn from the counter generator under ``seed``.
    """
    d, m = spec.d, spec.m
    out = {}
    if grid is not None:
        out["argmax"] = extract_policy(grid, spec)
    out["zero"] = Feedback(["0"] * m, d)
    if m:
        out["plus_sign"] = Feedback(["sign(x1)"] * m, d)
        out["minus_sign"] = Feedback(["-sign(x1)"] * m, d)
        lo, hi = spec.control_space.box(spec.control_space.n_levels)
        for i in range(n_random):
            c = rng.uniforms(seed, rng.SAMPLING, [1_000_003 + i], np.arange(4 * m))[0]
            exprs = []
            for j in range(m):
                a = lo[j] + (hi[j] - lo[j]) * c[4 * j] if hi[j] > lo[j] else lo[j]
                a = float(np.round(a, 6))
                b = float(np.round(8 * c[4 * j + 1] - 4, 6))
                cc = float(np.round(2 * c[4 * j + 2] - 1, 6))
                e = float(np.round(2 * c[4 * j + 3] - 1, 6))
                exprs.append(f"{a!r}*tanh({b!r}*x1 + {cc!r}*t + {e!r})")
            out[f"random_{i}"] = Feedback(exprs, d)
    return out


# ---------------------------------------------------------------- verify


@dataclass
class DppReport:
    v_ref: float
    t: float
    x: list
    rows: list
    flags: dict
    budgets: dict
    spec_hash: str
    achievability: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.flags.values())

    def as_dict(self):
        return {"v_ref": self.v_ref, "t": self.t, "x": self.x, "rows": self.rows, "flags": self.flags,
                "budgets": self.budgets, "spec_hash": self.spec_hash,
                "achievability": self.achievability}

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


def _check_hash(spec, grid):
    h = grid.metadata.get("spec_hash")
    if h is not None and h != spec.spec_hash():
        raise ValueError(f"spec/grid hash mismatch: grid {h}, spec {spec.spec_hash()}")


def verify_dpp(spec, t, x, grid, policies, rules, n_paths=2000, seed=0, tol_model=None, mesh=None,
               level=None, workers=1, eps_opt_policy="argmax", row_budget=ROW_BUDGET):
    """Run every (policy, rule) pair and check both DPP inequalities.

    ``policies`` and ``rules`` are dicts keyed by ids used in the report.
    ``eps_opt_policy`` names the policy whose suboptimality is declared as
    ``eps_opt``; achievability is judged on its rows, or on the best row per
    rule when no policy of that name was given.
    """
    _check_hash(spec, grid)
    tol_model = tol_model or ToleranceModel()
    mesh = mesh or TimeMesh(0.0, spec.T, 1000)
    level = grid.metadata.get("control_level", spec.control_space.n_levels) if level is None else level
    steps = mesh.n_steps - mesh.index_of(t)
    if n_paths * steps * len(policies) * len(rules) > row_budget:
        raise BudgetError(f"verify budget {n_paths} paths x {steps} steps x "
                          f"{len(policies) * len(rules)} rows exceeds {row_budget}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v_ref = float(grid.evaluate(t, x))
    eps_disc = tol_model.eps_disc(mesh.dt, float(np.max(grid.space.spacing)))
    eps_opt = tol_model.eps_opt(spec.control_space.pitch(level))
    rows = []
    for pid, policy in policies.items():
        for rid, rule in rules.items():
            row_seed = rng.derive_seed(seed, "verify", pid, rid)
            est = estimate_conditional_J(spec, t, x, policy, rule, value=grid, mesh=mesh,
                                         n_paths=n_paths, seed=row_seed, level=level, workers=workers)
            upper = est.mean <= v_ref + 3 * est.std_error + eps_disc
            rows.append({"policy": pid, "rule": rid, "rule_desc": rule.describe(),
                         "policy_desc": policy.describe(), "estimate": est.mean,
                         "std_error": est.std_error, "slack": v_ref - est.mean,
                         "seed": row_seed, "n_paths": n_paths, "n_steps": mesh.n_steps,
                         "upper_ok": bool(upper)})
    achieved = {}
    for rid in rules:
        cand = [r for r in rows if r["rule"] == rid]
        best = max(cand, key=lambda r: r["estimate"])
        # the eps_opt budget is declared for one policy; judge that one when present
        judged = next((r for r in cand if r["policy"] == eps_opt_policy), best)
        ok = judged["estimate"] >= v_ref - 3 * judged["std_error"] - eps_disc - eps_opt
        achieved[rid] = {"judged_policy": judged["policy"], "estimate": judged["estimate"],
                         "gap": v_ref - judged["estimate"], "best_policy": best["policy"],
                         "best_estimate": best["estimate"], "ok": bool(ok)}
    flags = {"upper": all(r["upper_ok"] for r in rows),
             "achievable": all(a["ok"] for a in achieved.values())}
    budgets = {"eps_disc": eps_disc, "eps_opt": eps_opt, "eps_opt_policy": eps_opt_policy,
               "sigma_multiplier": 3, "dt_mc": mesh.dt,
               "dx_grid": float(np.max(grid.space.spacing)), "tol_model": tol_model.as_dict(),
               "seed": seed, "n_paths": n_paths}
    return DppReport(v_ref, float(t), x.tolist(), rows, flags, budgets, spec.spec_hash(), achieved)


# ---------------------------------------------------------------- cover


def _lattice(lo, hi, pitch):
    n = max(int(math.ceil((hi - lo) / pitch - 1e-12)), 0) + 1
    return np.linspace(lo, hi, n) if n > 1 else np.array([lo])


def build_cover(region, radius_fn, pitch=None):
    """Disjoint half-open cells covering a compact (t, x) box.

    ``region`` is ``(t_lo, t_hi, x_lo, x_hi)``. A lattice of the region is
    swept in decreasing t; a cell ``B(t_i, x_i; r_i)`` is emitted at every
    lattice point not yet covered by the earlier cells shrunk by one lattice
    pitch. The shrink margin makes the full-radius cells cover every point of
    the region, not only lattice points. Each point's cell has anchor time
    ``t_i >= t``.
    """
    t_lo, t_hi, x_lo, x_hi = region
    x_lo = np.atleast_1d(np.asarray(x_lo, dtype=float))
    x_hi = np.atleast_1d(np.asarray(x_hi, dtype=float))
    d = len(x_lo)
    if pitch is None:
        r0 = float(radius_fn(t_hi, (x_lo + x_hi) / 2))
        pitch = r0 / 4
    times = _lattice(t_lo, t_hi, pitch)[::-1]
    axes = [_lattice(a, b, pitch) for a, b in zip(x_lo, x_hi)]
    ht = times[0] - times[1] if len(times) > 1 else 0.0
    hx = max((a[1] - a[0]) if len(a) > 1 else 0.0 for a in axes)
    margin_t = ht
    margin_x = hx * math.sqrt(d) / 2
    grids = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    cells = []
    for tl in times:
        # coverage of this time level by earlier (shrunk) cells
        covered = np.zeros(len(points), dtype=bool)
        for c in cells:
            if tl > c.t - (c.radius - margin_t) and tl <= c.t:
                covered |= np.linalg.norm(points - np.asarray(c.x), axis=1) < c.radius - margin_x
        todo = np.flatnonzero(~covered)
        while todo.size:
            p = points[todo[0]]
            r = float(radius_fn(tl, p))
            if not r > max(margin_t, margin_x):
                raise ValueError(f"cover would not terminate: radius {r} at ({tl}, {p.tolist()}) is "
                                 f"not above the lattice pitch margin {max(margin_t, margin_x)}")
            cells.append(HalfOpenCell(float(tl), tuple(float(v) for v in p), r, len(cells)))
            hit = np.linalg.norm(points[todo] - p, axis=1) < r - margin_x
            hit[0] = True
            todo = todo[~hit]
    return Cover(cells)


def stitch(base, rule, cover, cell_policies, domain):
    """Composite policy: ``base`` before theta, then the owning cell's policy."""
    return Stitched(base, rule, cover, cell_policies, domain)


# ---------------------------------------------------------------- minorant


class LscMinorant(TransformerMixin, BaseEstimator):
    """Continuous minorant ``phi_n`` of a value grid.

    At the space-time nodes ``phi_n(q) = min_p [v(p) + n |q - p|]`` over all
    nodes p; between nodes ``phi_n`` is interpolated exactly like v. Since
    interpolation weights are nonnegative, ``phi_n <= phi_{n+1} <= v`` holds
    everywhere, not only at nodes, and a constant grid is its own minorant.
    A node farther than ``max(v) / n`` can never win, which bounds the
    offsets scanned.
    """

    def __init__(self, n=1):
        self.n = n

    def fit(self, grid, y=None):
        times = np.asarray(grid.times, dtype=float)
        dts = np.diff(times)
        if len(times) > 1 and not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
            raise ValueError("minorant needs uniformly spaced time slices")
        h = np.concatenate([[dts[0] if len(times) > 1 else np.inf], grid.space.spacing])
        values = np.asarray(grid.values, dtype=float)
        n = float(self.n)
        reach_len = float(values.max()) / n * (1 + 1e-9) if values.size else 0.0
        reach = [int(np.floor(reach_len / hj)) if np.isfinite(hj) else 0 for hj in h]
        reach = [min(r, s - 1) for r, s in zip(reach, values.shape)]
        offs = np.stack([g.ravel() for g in np.meshgrid(*[np.arange(-r, r + 1) for r in reach],
                                                         indexing="ij")], axis=1)
        hh = np.where(np.isfinite(h), h, 0.0)
        dist = np.sqrt(((offs * hh) ** 2).sum(axis=1))
        keep = (dist <= reach_len) & (dist > 0)
        phi = values.copy()
        for off, dd in zip(offs[keep], dist[keep]):
            src, dst = [], []
            for o, size in zip(off, values.shape):
                src.append(slice(o, size) if o >= 0 else slice(0, size + o))
                dst.append(slice(0, size - o) if o >= 0 else slice(-o, size))
            np.minimum(phi[tuple(dst)], values[tuple(src)] + n * dd, out=phi[tuple(dst)])
        self.node_values_ = phi
        self.grid_ = ValueGrid(grid.space, grid.mesh, grid.stored, phi, None, None,
                               {"minorant_n": self.n})
        return self

    def transform(self, Z):
        """Rows ``(t, x_1..x_d)`` to ``phi_n`` values."""
        check_is_fitted(self, "grid_")
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return self.grid_.evaluate(Z[:, 0], Z[:, 1:])

    def __call__(self, t, X):
        check_is_fitted(self, "grid_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.grid_.evaluate(np.broadcast_to(np.asarray(t, dtype=float), (len(X),)), X)


def lsc_minorant(grid, n):
    """Callable ``phi_n(t, X)``; see :class:`LscMinorant`."""
    return LscMinorant(n).fit(grid)


# ---------------------------------------------------------------- stitching test


def stitching_improvement_test(spec, t, x, base, rule, cover, cell_policies, phi, eps_decl, grid,
                               n_paths=2000, seed=0, mesh=None, tol_model=None, level=None,
                               workers=1):
    """Check ``v(t,x) >= J(beta) >= E[int_t^theta f + phi(theta, X_theta)] - 3 eps_decl``.

    Both estimates use the same seed, so they share the base path up to
    theta. Each inequality is allowed ``3`` combined standard errors plus
    the discretization allowance of ``tol_model``.
    """
    tol_model = tol_model or ToleranceModel()
    mesh = mesh or TimeMesh(0.0, spec.T, 1000)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v_ref = float(grid.evaluate(t, x))
    eps_disc = tol_model.eps_disc(mesh.dt, float(np.max(grid.space.spacing)))
    beta = stitch(base, rule, cover, cell_policies, spec.domain)
    j_beta = estimate_J(spec, t, x, beta, mesh, n_paths, seed, level=level, workers=workers)
    rhs = estimate_conditional_J(spec, t, x, base, rule, value=phi, mesh=mesh, n_paths=n_paths,
                                 seed=seed, level=level, workers=workers)
    tol_left = 3 * j_beta.std_error + eps_disc
    tol_right = 3 * math.hypot(j_beta.std_error, rhs.std_error) + eps_disc
    left = v_ref >= j_beta.mean - tol_left
    right = j_beta.mean >= rhs.mean - 3 * eps_decl - tol_right
    return {"v_ref": v_ref, "J_beta": j_beta.as_dict(), "rhs": rhs.as_dict(),
            "eps_decl": eps_decl, "eps_disc": eps_disc, "tol_left": tol_left,
            "tol_right": tol_right, "cells": len(cover), "rule": rule.describe(),
            "base": base.describe(), "flags": {"v_ge_J_beta": bool(left),
                                               "J_beta_ge_rhs": bool(right)},
            "passed": bool(left and right)}
