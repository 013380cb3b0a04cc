"""Monte Carlo estimation of J(t, x, alpha) and of the dynamic-programming
right-hand side, plus discrete lower-semicontinuous envelopes."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import rng
from .exittime import bridge_crossing_probability, face_variance_rates
from .paths import SimulationError, TimeMesh, euler_step
from .validation import check_points, check_positive_int, check_seed

CHUNK = 1024
NOISE_BLOCK = 128
NESTED_BUDGET = 10_000_000


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class Estimate:
    mean: float
    std_error: float
    n_paths: int
    seed: int
    saturated: int = 0

    def as_dict(self):
        return {"mean": self.mean, "std_error": self.std_error, "n_paths": self.n_paths,
                "seed": self.seed, "saturated": self.saturated}


def summarize(values, seed, saturated=0):
    """Mean and standard error with order-independent (exactly rounded) sums.

    The mean is taken around the first sample, so a sample of identical
    values returns that value bit for bit.
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n == 0:
        raise ValueError("no samples")
    c = float(values[0])
    mean = c + math.fsum(values - c) / n
    if n > 1:
        var = math.fsum((values - mean) ** 2) / (n - 1)
        se = math.sqrt(var / n)
    else:
        se = 0.0
    if (values >= 0).all():
        mean = max(mean, 0.0)
    return Estimate(float(mean), float(se), n, int(seed), int(saturated))


@dataclass
class _Outcome:
    integral: np.ndarray  # running reward up to the stopping index
    stop: np.ndarray  # mesh index where accumulation stopped
    state: np.ndarray  # state at the stopping index
    exited: np.ndarray  # stopped because the path left G (grid or bridge)
    saturated: int


def _run(spec, mesh, x0, k0, policy, level, seed, path_ids, stream=rng.BROWNIAN,
         bridge=False, rule=None, f_max=np.inf):
    """Simulate a batch and integrate f up to tau (or theta ^ tau when ``rule``).

    Paths are dropped from the working arrays as soon as they stop, and noise
    is generated per block of steps for the surviving paths only.
    """
    n, d = x0.shape
    N = mesh.n_steps
    dt = mesh.dt
    domain = spec.domain
    coef = spec.coefficients
    cs = spec.control_space
    integral = np.zeros(n)
    stop = np.full(n, N, dtype=np.int64)
    final = x0.copy()
    exited = np.zeros(n, dtype=bool)
    saturated = 0

    rows = np.arange(n)  # original row of each working entry
    X = x0.copy()
    acc = np.zeros(n)
    ids = np.asarray(path_ids, dtype=np.uint64)
    start = np.asarray(k0, dtype=np.int64)
    pstate = policy.start(n, start, mesh)
    if bridge:
        faces = domain.faces()
        normals = np.array([nv for nv, _ in faces])
        offsets = np.array([c for _, c in faces])
    noise = None
    block_start = -1

    k = int(start.min()) if n else N
    while rows.size and k < N:
        if noise is None or k >= block_start + NOISE_BLOCK:
            block_start = k
            noise = rng.normals(seed, stream, ids, np.arange(k, min(k + NOISE_BLOCK, N)), d)
            noise *= math.sqrt(dt)
        running = start <= k
        inside = domain.contains(X)
        done = running & ~inside
        if rule is not None:
            done |= running & rule.triggered(k, mesh, X)
        if done.any():
            r = rows[done]
            stop[r] = k
            final[r] = X[done]
            integral[r] = acc[done]
            exited[r] = ~inside[done]
            keep = ~done
            rows, X, acc, ids, start = rows[keep], X[keep], acc[keep], ids[keep], start[keep]
            noise = noise[keep]
            running = running[keep]
            pstate = policy.compact(pstate, keep)
            if not rows.size:
                break
        t = mesh.time(k)
        U = cs.clamp(policy.controls(k, t, X, pstate), level)
        f = coef.reward(t, X, U)
        spec.check_reward(f, t, X, U)
        over = f > f_max
        if over.any():
            saturated += int(np.count_nonzero(over & running))
            f = np.minimum(f, f_max)
        acc = np.where(running, acc + f * dt, acc)
        dW = noise[:, k - block_start]
        Xn = euler_step(spec, mesh, k, X, U, dW)
        if not np.isfinite(Xn[running]).all():
            bad = rows[np.flatnonzero(running & ~np.isfinite(Xn).all(axis=1))[0]]
            raise SimulationError(f"non-finite state at step {k} (path {int(path_ids[bad])})")
        if bridge:
            both = running & domain.contains(Xn)
            if both.any():
                b_idx = np.flatnonzero(both)
                d0 = offsets[None, :] - X[b_idx] @ normals.T
                d1 = offsets[None, :] - Xn[b_idx] @ normals.T
                sig = coef.diffusion(t, X[b_idx], U[b_idx])
                p = bridge_crossing_probability(d0, d1, face_variance_rates(sig, normals), dt)
                u = np.stack([rng.uniforms(seed, rng.BRIDGE + 16 * stream, ids[b_idx], [k], lane=f_)[:, 0]
                              for f_ in range(len(faces))], axis=1)
                crossed = np.zeros(len(rows), dtype=bool)
                crossed[b_idx] = (u < p).any(axis=1)
                if crossed.any():
                    r = rows[crossed]
                    stop[r] = k + 1
                    final[r] = Xn[crossed]
                    integral[r] = acc[crossed]
                    exited[r] = True
                    keep = ~crossed
                    rows, X, Xn, acc = rows[keep], X[keep], Xn[keep], acc[keep]
                    ids, start = ids[keep], start[keep]
                    noise = noise[keep]
                    running = running[keep]
                    pstate = policy.compact(pstate, keep)
        X = np.where(running[:, None], Xn, X) if rows.size else Xn
        k += 1
    if rows.size:
        # reached the horizon (or never started because k0 == N)
        inside = domain.contains(X)
        stop[rows] = N
        final[rows] = X
        integral[rows] = acc
        exited[rows] = ~inside
    return _Outcome(integral, stop, final, exited, saturated)


def _chunks(n_paths, chunk=CHUNK):
    return [np.arange(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _start(spec, mesh, t, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (spec.d,):
        raise ValueError(f"start point has shape {x.shape}, expected ({spec.d},)")
    if not 0.0 <= t <= spec.T:
        raise ValueError(f"start time {t} outside [0, {spec.T}]")
    return mesh.index_of(t), x


def _merge(parts):
    return _Outcome(np.concatenate([p.integral for p in parts]),
                    np.concatenate([p.stop for p in parts]),
                    np.concatenate([p.state for p in parts]),
                    np.concatenate([p.exited for p in parts]),
                    sum(p.saturated for p in parts))


def _simulate_outcomes(spec, mesh, t, x, policy, n_paths, seed, level, bridge, rule, workers, f_max):
    k0, x = _start(spec, mesh, t, x)
    level = spec.control_space.n_levels if level is None else level

    def work(ids):
        x0 = np.broadcast_to(x, (len(ids), spec.d)).copy()
        return _run(spec, mesh, x0, np.full(len(ids), k0), policy, level, seed, ids,
                    bridge=bridge, rule=rule, f_max=f_max)

    return _merge(_map(work, _chunks(n_paths), workers))


def estimate_J(spec, t, x, policy, mesh=None, n_paths=1000, seed=0, bridge=False, level=None,
               workers=1, f_max=np.inf):
    """Monte Carlo estimate of ``J(t, x, policy) = E int_t^tau f ds``.

    Left-endpoint quadrature on the mesh, grid-point exit detection (or the
    Brownian-bridge test with ``bridge=True``). Per-step rewards above
    ``f_max`` are capped and counted in ``Estimate.saturated``.
    """
    mesh = mesh or TimeMesh(0.0, spec.T, 1000)
    check_positive_int(n_paths, "n_paths")
    seed = check_seed(seed)
    out = _simulate_outcomes(spec, mesh, t, x, policy, n_paths, seed, level, bridge, None,
                             workers, f_max)
    return summarize(out.integral, seed, out.saturated)


def _value_at(value, times, states):
    if callable(getattr(value, "evaluate", None)):
        return value.evaluate(times, states)
    if callable(value):
        return np.asarray(value(times, states), dtype=float)
    return np.full(len(states), float(value))


def estimate_conditional_J(spec, t, x, policy, rule, value=None, mesh=None, n_paths=1000, seed=0,
                           n_inner=100, bridge=False, level=None, workers=1, f_max=np.inf,
                           budget=NESTED_BUDGET, return_samples=False):
    """Estimate ``E[int_t^theta f ds + V(theta, X_theta)]`` with ``theta = rule ^ tau``.

    ``value`` is a value grid (anything with ``evaluate(times, states)``), a
    callable ``V(times, states)``, a constant, or ``None``. With ``None`` the
    continuation is a fresh nested estimate of ``J(theta, X_theta, policy)``
    from ``n_inner`` inner paths per outer path; this needs a policy that only
    looks at the current state (which is then its own shift).
    """
    mesh = mesh or TimeMesh(0.0, spec.T, 1000)
    check_positive_int(n_paths, "n_paths")
    seed = check_seed(seed)
    out = _simulate_outcomes(spec, mesh, t, x, policy, n_paths, seed, level, bridge, rule,
                             workers, f_max)
    saturated = out.saturated
    live = ~out.exited & (out.stop < mesh.n_steps)
    if value is not None:
        times = mesh.times[out.stop]
        cont = np.zeros(n_paths)
        if live.any():
            cont[live] = _value_at(value, times[live], out.state[live])
        samples = out.integral + cont
    else:
        if policy.stateful:
            raise ValueError("nested estimation needs a stateless policy")
        check_positive_int(n_inner, "n_inner")
        outer = np.flatnonzero(live)
        if len(outer) * n_inner > budget:
            raise BudgetError(f"nested budget {len(outer)} x {n_inner} exceeds cap {budget}")
        lev = spec.control_space.n_levels if level is None else level
        inner_ids = (outer[:, None] * n_inner + np.arange(n_inner)[None, :]).ravel()
        inner_x = np.repeat(out.state[outer], n_inner, axis=0)
        inner_k = np.repeat(out.stop[outer], n_inner)

        def work(sl):
            return _run(spec, mesh, inner_x[sl], inner_k[sl], policy, lev, seed, inner_ids[sl],
                        stream=rng.NESTED, bridge=bridge, f_max=f_max)

        parts = _map(work, _chunks(len(inner_ids)), workers)
        cont = np.zeros(n_paths)
        if parts:
            inner = _merge(parts)
            saturated += inner.saturated
            per_outer = inner.integral.reshape(len(outer), n_inner)
            cont[outer] = [math.fsum(row) / n_inner for row in per_outer]
        samples = out.integral + cont
    est = summarize(samples, seed, saturated)
    if return_samples:
        return est, samples, out
    return est


# ---------------------------------------------------------------- lsc envelope


@dataclass
class EnvelopeResult:
    envelopes: dict  # radius -> envelope array
    violations: list  # grid indices where env < value - tol at the smallest radius
    tol: float
    radius: float


def _grid_arrays(grid_values, axes):
    if axes is None:
        values = np.asarray(grid_values.values, dtype=float)
        axes = [grid_values.times] + list(grid_values.space.axes)
    else:
        values = np.asarray(grid_values, dtype=float)
    axes = [np.asarray(a, dtype=float) for a in axes]
    if values.shape != tuple(len(a) for a in axes):
        raise ValueError(f"values shape {values.shape} does not match axes")
    return values, axes


def _spacing(axes):
    h = []
    for a in axes:
        if len(a) < 2:
            h.append(np.inf)
            continue
        da = np.diff(a)
        if not np.allclose(da, da[0], rtol=1e-9, atol=0):
            raise ValueError("lsc_envelope needs uniformly spaced axes")
        h.append(float(da[0]))
    return h


def _shifted_min(values, offsets):
    env = values.copy()
    nd = values.ndim
    for off in offsets:
        if not any(off):
            continue
        src = []
        dst = []
        for o, size in zip(off, values.shape):
            if o >= 0:
                src.append(slice(o, size))
                dst.append(slice(0, size - o))
            else:
                src.append(slice(0, size + o))
                dst.append(slice(-o, size))
        if any(s.start >= s.stop for s in src[:nd]):
            continue
        np.minimum(env[tuple(dst)], values[tuple(src)], out=env[tuple(dst)])
    return env


def _ball_offsets(h, radius):
    reach = [int(np.floor(radius / hi + 1e-12)) if np.isfinite(hi) else 0 for hi in h]
    rng_ = [np.arange(-r, r + 1) for r in reach]
    grids = np.meshgrid(*rng_, indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    hh = np.array([hi if np.isfinite(hi) else 0.0 for hi in h])
    dist = np.sqrt(((offs * hh) ** 2).sum(axis=1))
    return [tuple(int(v) for v in o) for o in offs[dist <= radius * (1 + 1e-12)]]


def grid_modulus(grid_values, axes=None):
    """Largest absolute difference between neighbouring nodes along any axis."""
    values, _ = _grid_arrays(grid_values, axes)
    out = 0.0
    for ax in range(values.ndim):
        if values.shape[ax] > 1:
            out = max(out, float(np.max(np.abs(np.diff(values, axis=ax)))))
    return out


def lsc_envelope(grid_values, radii, axes=None, tol=0.0):
    """Discrete ``inf`` over closed balls of each radius around every node.

    ``grid_values`` is either an array sampled on the tensor grid ``axes``
    (first axis time, then space) or a value grid object. Points where the
    envelope at the smallest radius falls below ``value - tol`` are reported
    as lower-semicontinuity violations at grid resolution.
    """
    values, axes = _grid_arrays(grid_values, axes)
    h = _spacing(axes)
    radii = sorted((float(r) for r in radii), reverse=True)
    envs = {r: _shifted_min(values, _ball_offsets(h, r)) for r in radii}
    r_min = radii[-1]
    bad = np.argwhere(envs[r_min] < values - tol)
    return EnvelopeResult(envs, [tuple(int(i) for i in b) for b in bad], float(tol), r_min)


# ---------------------------------------------------------------- estimator


class MonteCarloValue(BaseEstimator):
    """Estimator wrapper around :func:`estimate_J`.

    ``fit(spec)`` binds the problem; ``predict(X)`` takes rows ``(t, x_1..x_d)``
    and returns the estimated ``J`` at each.
    """

    def __init__(self, policy=None, n_paths=1000, n_steps=1000, seed=0, bridge=False, level=None,
                 workers=1):
        self.policy = policy
        self.n_paths = n_paths
        self.n_steps = n_steps
        self.seed = seed
        self.bridge = bridge
        self.level = level
        self.workers = workers

    def fit(self, spec, y=None):
        from .paths import zero_policy

        self.spec_ = spec
        self.mesh_ = TimeMesh(0.0, spec.T, check_positive_int(self.n_steps, "n_steps"))
        self.policy_ = self.policy if self.policy is not None else zero_policy(spec.d, spec.m)
        return self

    def estimate(self, t, x):
        check_is_fitted(self, "spec_")
        return estimate_J(self.spec_, t, x, self.policy_, self.mesh_, self.n_paths, self.seed,
                          self.bridge, self.level, self.workers)

    def predict(self, X):
        check_is_fitted(self, "spec_")
        X = check_points(X, self.spec_.d)
        return np.array([self.estimate(row[0], row[1:]).mean for row in X])
