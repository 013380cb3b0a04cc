"""Backward dynamic programming for the value function on a space-time grid.

The scheme is the explicit upwind (Markov chain approximation) recursion

    v[k](x) = max_u { f(t_k, x, u) dt + sum_j p_j(x, u) v[k+1](x_j) }

over the finite control mesh, with v = 0 at the horizon and at nodes outside
G. Drift is upwinded, diffusion is central, and the weights are nonnegative
and sum to one whenever the CFL condition holds, so the scheme is monotone.
Only diagonal sigma sigma^T is supported.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .paths import ControlPolicy, TimeMesh
from .validation import check_points

CFL_TOL = 1e-12
ANISOTROPY_TOL = 1e-12
WEIGHT_SUM_TOL = 4 * np.finfo(float).eps
SNAP = 1e-9
MAGIC = b"EXDPPVG1"


class CFLError(ValueError):
    pass


class AnisotropyError(ValueError):
    pass


# ---------------------------------------------------------------- space grid


class SpaceGrid:
    """Tensor grid over a bounding box of G, with an inside-G mask."""

    def __init__(self, lower, upper, counts, domain=None):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.counts = tuple(int(c) for c in np.atleast_1d(counts))
        if len(self.counts) != len(self.lower) or any(c < 2 for c in self.counts):
            raise ValueError("need at least two nodes per axis")
        if not np.all(self.upper > self.lower):
            raise ValueError("grid box must have positive extent")
        self.axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]
        self.spacing = (self.upper - self.lower) / (np.asarray(self.counts) - 1)
        self.domain = domain
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.nodes = np.stack([g.ravel() for g in mesh], axis=1)
        if domain is not None:
            self.inside = domain.contains(self.nodes).reshape(self.counts)
        else:
            self.inside = np.ones(self.counts, dtype=bool)

    @classmethod
    def from_domain(cls, domain, n_nodes=None, spacing=None, bounds=None, truncation=10.0):
        """Grid on the bounding box of ``domain`` (or on ``bounds``).

        Infinite bounding-box sides are truncated at ``+-truncation`` with a
        warning; no convergence claim is made for the truncation.
        """
        if bounds is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        else:
            lo, hi = domain.bounds()
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                warnings.warn(f"unbounded domain truncated to |x_j| <= {truncation}", stacklevel=2)
                lo = np.where(np.isfinite(lo), lo, -truncation)
                hi = np.where(np.isfinite(hi), hi, truncation)
        if n_nodes is None and spacing is None:
            raise ValueError("give n_nodes or spacing")
        if n_nodes is None:
            sp = np.broadcast_to(np.asarray(spacing, dtype=float), lo.shape)
            n_nodes = np.rint((hi - lo) / sp).astype(int) + 1
        counts = np.broadcast_to(np.asarray(n_nodes, dtype=int), lo.shape)
        return cls(lo, hi, counts, domain)

    @property
    def d(self):
        return len(self.counts)

    @property
    def size(self):
        return int(np.prod(self.counts))


# ---------------------------------------------------------------- stencil


@dataclass
class Stencil:
    """Transition weights of every (control, node) pair at one time."""

    reward_dt: np.ndarray  # (K, *counts)
    stay: np.ndarray  # (K, *counts)
    up: list  # per axis, (K, *counts)
    down: list
    cfl: float  # max over inside nodes/controls of the moving mass

    def weights_ok(self, inside):
        """(min weight, max |sum - 1|) over inside nodes."""
        parts = [self.stay] + self.up + self.down
        m = inside[None]
        w_min = min(float(np.min(np.where(m, p, np.inf))) for p in parts)
        total = self.stay.copy()
        for p in self.up + self.down:
            total = total + p
        dev = float(np.max(np.where(m, np.abs(total - 1.0), 0.0)))
        return w_min, dev


def stencil(spec, space, controls, t, dt):
    """Upwind weights at time ``t`` for every control in ``controls`` (K, m)."""
    K = len(controls)
    N = space.size
    d = space.d
    X = np.tile(space.nodes, (K, 1))
    U = np.repeat(controls, N, axis=0)
    coef = spec.coefficients
    b = coef.drift(t, X, U)
    s = coef.diffusion(t, X, U)
    a = np.einsum("nij,nkj->nik", s, s)
    if not (np.isfinite(b).all() and np.isfinite(a).all()):
        raise ValueError(f"non-finite drift or diffusion on the grid at t={t}")
    diag = np.einsum("nii->ni", a)
    off = np.abs(a).sum(axis=(1, 2)) - np.abs(diag).sum(axis=1)
    scale = np.abs(diag).sum(axis=1)
    bad = off > ANISOTROPY_TOL * np.maximum(scale, np.finfo(float).tiny)
    inside_flat = np.tile(space.inside.ravel(), K)
    if (bad & inside_flat).any():
        i = int(np.flatnonzero(bad & inside_flat)[0])
        raise AnisotropyError(
            f"sigma sigma^T is not diagonal at x={X[i].tolist()}, u={U[i].tolist()}: "
            "cross-derivative stencils are not supported")
    f = coef.reward(t, X, U)
    spec.check_reward(f, t, X, U)
    h = space.spacing
    shape = (K,) + space.counts
    up, down = [], []
    moving = np.zeros(K * N)
    for j in range(d):
        diff = dt * diag[:, j] / (2.0 * h[j] ** 2)
        adv = dt * b[:, j] / h[j]
        u_j = diff + np.maximum(adv, 0.0)
        d_j = diff + np.maximum(-adv, 0.0)
        moving = moving + u_j + d_j
        up.append(u_j.reshape(shape))
        down.append(d_j.reshape(shape))
    masked = np.where(inside_flat, moving, 0.0)
    worst = int(np.argmax(masked))
    cfl = float(masked[worst])
    if cfl > 1.0 + CFL_TOL:
        raise CFLError(
            f"CFL condition violated at t={t}, x={X[worst].tolist()}, u={U[worst].tolist()}: "
            f"dt*(sum a_jj/dx_j^2 + sum |b_j|/dx_j) = {cfl:.6g} > 1")
    stay = np.maximum(1.0 - moving, 0.0)
    return Stencil((f * dt).reshape(shape), stay.reshape(shape), up, down, cfl)


def _neighbour_views(vp, nd):
    """Views of a zero-padded array: centre, then (+1, -1) neighbours per axis."""
    core = (slice(1, -1),) * nd
    out = []
    for j in range(nd):
        plus = list(core)
        minus = list(core)
        plus[j] = slice(2, None)
        minus[j] = slice(0, -2)
        out.append((vp[tuple(plus)], vp[tuple(minus)]))
    return vp[core], out


def bellman_backup(v_next, st, inside):
    """One backward step. Returns ``(v, argmax)`` with ties to the lowest index.

    Nodes beyond the grid box read as zero (they are outside G).
    """
    nd = v_next.ndim
    vp = np.pad(v_next, 1)
    centre, nbrs = _neighbour_views(vp, nd)
    cand = st.stay * centre
    cand += st.reward_dt
    for j, (plus, minus) in enumerate(nbrs):
        cand += st.up[j] * plus
        cand += st.down[j] * minus
    if cand.shape[0] == 1:
        best = np.zeros(v_next.shape, dtype=np.int64)
        v = cand[0]
    else:
        best = np.argmax(cand, axis=0)
        v = np.take_along_axis(cand, best[None], axis=0)[0]
    v = np.where(inside, v, 0.0)
    return v, np.where(inside, best, 0)


def cfl_steps(spec, space, level=None, t0=0.0, n_time_samples=11):
    """Smallest step count on [t0, T] meeting the CFL condition (sampled in t)."""
    level = spec.control_space.n_levels if level is None else level
    controls = spec.control_space.mesh(level)
    times = np.linspace(t0, spec.T, n_time_samples) if spec.coefficients.uses_time() else [t0]
    rate = 0.0
    for t in times:
        K = len(controls)
        X = np.tile(space.nodes, (K, 1))
        U = np.repeat(controls, space.size, axis=0)
        b = spec.coefficients.drift(t, X, U)
        s = spec.coefficients.diffusion(t, X, U)
        diag = np.einsum("nij,nij->ni", s, s)
        r = (diag / space.spacing ** 2 + np.abs(b) / space.spacing).sum(axis=1)
        r = np.where(np.tile(space.inside.ravel(), K), r, 0.0)
        rate = max(rate, float(r.max()))
    return max(1, int(math.ceil((spec.T - t0) * rate * (1 - 1e-12))))


# ---------------------------------------------------------------- value grid


@dataclass
class ValueGrid:
    space: SpaceGrid
    mesh: TimeMesh  # the solver's time mesh
    stored: np.ndarray  # mesh indices of the stored slices
    values: np.ndarray  # (len(stored), *counts)
    argmax: np.ndarray = None  # (len(stored), *counts) control-mesh indices
    controls: np.ndarray = None  # (K, m) control mesh used by the solve
    metadata: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.mesh.times[self.stored]

    @property
    def T(self):
        return self.mesh.T

    def slice_at(self, k):
        """Stored slice for mesh index ``k``."""
        pos = np.searchsorted(self.stored, k)
        if pos >= len(self.stored) or self.stored[pos] != k:
            raise KeyError(f"mesh index {k} is not stored")
        return self.values[pos]

    def _space_weights(self, X):
        sp = self.space
        p = (X - sp.lower) / sp.spacing
        r = np.rint(p)
        p = np.where(np.abs(p - r) < SNAP, r, p)
        i0 = np.clip(np.floor(p).astype(np.int64), 0, np.asarray(sp.counts) - 2)
        w = p - i0
        return i0, w

    def evaluate(self, t, x):
        """Multilinear in space, linear in time; 0 outside the box or outside G."""
        scalar = np.ndim(x) <= 1
        X = np.atleast_2d(np.asarray(x, dtype=float))
        n = len(X)
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        sp = self.space
        out = np.zeros(n)
        ok = np.all((X >= sp.lower) & (X <= sp.upper), axis=1)
        if sp.domain is not None:
            ok &= sp.domain.contains(X)
        if not ok.any():
            return float(out[0]) if scalar else out
        Xo = X[ok]
        i0, w = self._space_weights(Xo)
        times = self.times
        tpos = (t[ok] - times[0]) / (times[1] - times[0]) if len(times) > 1 else np.zeros(len(Xo))
        tr = np.rint(tpos)
        tpos = np.where(np.abs(tpos - tr) < SNAP, tr, tpos)
        tpos = np.clip(tpos, 0, len(times) - 1)
        k0 = np.clip(np.floor(tpos).astype(np.int64), 0, max(len(times) - 2, 0))
        wt = tpos - k0
        d = sp.d
        acc = np.zeros(len(Xo))
        for corner in range(2 ** d):
            bits = [(corner >> j) & 1 for j in range(d)]
            idx = tuple(i0[:, j] + bits[j] for j in range(d))
            wc = np.ones(len(Xo))
            for j in range(d):
                wc = wc * (w[:, j] if bits[j] else 1.0 - w[:, j])
            v_lo = self.values[(k0,) + idx]
            if len(times) > 1:
                v_hi = self.values[(np.minimum(k0 + 1, len(times) - 1),) + idx]
                v_c = (1.0 - wt) * v_lo + wt * v_hi
            else:
                v_c = v_lo
            acc = acc + wc * v_c
        out[ok] = np.maximum(acc, 0.0)
        return float(out[0]) if scalar else out

    # ------------------------------------------------------------ io

    def to_csv(self, path):
        """Rows ``t, x1..xd, v`` for every stored slice and node."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j + 1}" for j in range(self.space.d)] + ["v"])
            nodes = self.space.nodes
            for t, slab in zip(self.times, self.values):
                for x, v in zip(nodes, slab.ravel()):
                    w.writerow([repr(float(t))] + [repr(float(c)) for c in x] + [repr(float(v))])

    def to_binary(self, path):
        """Layout (little endian): magic ``EXDPPVG1``; uint32 d, n_times;
        uint32 counts[d]; float64 lower[d], upper[d]; float64 times[n_times];
        uint8 inside[prod(counts)]; float64 values[n_times, *counts] row-major."""
        sp = self.space
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", sp.d, len(self.stored)))
            fh.write(struct.pack(f"<{sp.d}I", *sp.counts))
            fh.write(np.asarray(sp.lower, "<f8").tobytes())
            fh.write(np.asarray(sp.upper, "<f8").tobytes())
            fh.write(np.asarray(self.times, "<f8").tobytes())
            fh.write(sp.inside.astype(np.uint8).tobytes())
            fh.write(np.ascontiguousarray(self.values, "<f8").tobytes())

    @classmethod
    def from_binary(cls, path, domain=None):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != MAGIC:
            raise ValueError("not a value-grid file (bad magic)")
        off = 8
        d, nt = struct.unpack_from("<II", blob, off)
        off += 8
        counts = struct.unpack_from(f"<{d}I", blob, off)
        off += 4 * d

        def take(n, dtype, size):
            nonlocal off
            arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off)
            off += n * size
            return arr.copy()

        lower = take(d, "<f8", 8)
        upper = take(d, "<f8", 8)
        times = take(nt, "<f8", 8)
        ncell = int(np.prod(counts))
        inside = take(ncell, np.uint8, 1).astype(bool).reshape(counts)
        values = take(nt * ncell, "<f8", 8).reshape((nt,) + tuple(counts))
        space = SpaceGrid(lower, upper, counts, domain)
        space.inside = inside
        n_steps = nt - 1 if nt > 1 else 1
        mesh = TimeMesh(float(times[0]), float(times[-1]), n_steps)
        return cls(space, mesh, np.arange(nt), values)

    @classmethod
    def from_csv(cls, path, domain=None):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times = np.unique(data[:, 0])
        d = data.shape[1] - 2
        axes = [np.unique(data[:, 1 + j]) for j in range(d)]
        counts = tuple(len(a) for a in axes)
        values = data[:, -1].reshape((len(times),) + counts)
        space = SpaceGrid([a[0] for a in axes], [a[-1] for a in axes], counts, domain)
        mesh = TimeMesh(float(times[0]), float(times[-1]), max(len(times) - 1, 1))
        return cls(space, mesh, np.arange(len(times)), values)


def _store_every(n_steps, store_every, max_slices):
    if store_every is None:
        store_every = max(1, math.ceil(n_steps / max(max_slices - 1, 1)))
        while n_steps % store_every:
            store_every += 1
    if n_steps % store_every:
        raise ValueError(f"store_every={store_every} must divide n_steps={n_steps}")
    return int(store_every)


def solve(spec, space, mesh, level=None, store_every=None, max_slices=2001):
    """Backward recursion from v(T) = 0; returns a :class:`ValueGrid`.

    Every ``store_every``-th slice is kept (always including t0 and T).
    Raises :class:`CFLError` naming the worst node/control if the step is too
    large, and :class:`AnisotropyError` for non-diagonal sigma sigma^T.
    """
    level = spec.control_space.n_levels if level is None else level
    controls = spec.control_space.mesh(level)
    if space.d != spec.d:
        raise ValueError(f"grid dimension {space.d} does not match problem dimension {spec.d}")
    N = mesh.n_steps
    every = _store_every(N, store_every, max_slices)
    stored = np.arange(0, N + 1, every)
    values = np.zeros((len(stored),) + space.counts)
    argmax = np.zeros((len(stored),) + space.counts, dtype=np.int64)
    inside = space.inside
    dt = mesh.dt
    time_dependent = spec.coefficients.uses_time()
    st = None if time_dependent else stencil(spec, space, controls, mesh.time(0), dt)
    worst_cfl = st.cfl if st is not None else 0.0
    w_min, w_dev = st.weights_ok(inside) if st is not None else (np.inf, 0.0)
    v = np.zeros(space.counts)
    for k in range(N - 1, -1, -1):
        if time_dependent:
            st = stencil(spec, space, controls, mesh.time(k), dt)
            worst_cfl = max(worst_cfl, st.cfl)
            wm, wd = st.weights_ok(inside)
            w_min, w_dev = min(w_min, wm), max(w_dev, wd)
        v, best = bellman_backup(v, st, inside)
        if k % every == 0:
            values[k // every] = v
            argmax[k // every] = best
    if w_min < 0 or w_dev > WEIGHT_SUM_TOL:
        raise AssertionError(f"stencil weights invalid: min={w_min}, max |sum-1|={w_dev}")
    grid = ValueGrid(space, mesh, stored, values, argmax, controls, {
        "spec_hash": spec.spec_hash(), "control_level": level, "n_steps": N, "dt": dt,
        "spacing": space.spacing.tolist(), "store_every": every, "cfl": worst_cfl,
        "cfl_margin": 1.0 - worst_cfl, "min_weight": w_min, "max_weight_sum_error": w_dev,
    })
    return grid


def check_grid(grid):
    """Assert v >= 0, v(T) = 0 and v = 0 outside G."""
    v = grid.values
    if (v < 0).any():
        raise AssertionError("negative value on the grid")
    if grid.stored[-1] == grid.mesh.n_steps and np.any(v[-1] != 0):
        raise AssertionError("terminal slice is not zero")
    if np.any(v[:, ~grid.space.inside] != 0):
        raise AssertionError("nonzero value outside G")
    return True


# ---------------------------------------------------------------- policy table


class TablePolicy(ControlPolicy):
    """Feedback from a solved grid: nearest node in space, latest stored slice in time."""

    def __init__(self, grid):
        self.grid = grid
        self.controls_mesh = grid.controls
        self.table = grid.argmax

    def index(self, t, X):
        g = self.grid
        sp = g.space
        node = np.rint((X - sp.lower) / sp.spacing).astype(np.int64)
        node = np.clip(node, 0, np.asarray(sp.counts) - 1)
        times = g.times
        dts = times[1] - times[0]
        k = int(np.floor((t - times[0]) / dts + SNAP))
        k = min(max(k, 0), len(times) - 2)
        return (np.full(len(X), k),) + tuple(node[:, j] for j in range(sp.d))

    def controls(self, k, t, X, state):
        return self.controls_mesh[self.table[self.index(t, X)]]

    def describe(self):
        return f"TablePolicy(spec_hash={self.grid.metadata.get('spec_hash')})"


def extract_policy(grid, spec=None, level=None):
    """The argmax feedback of the solve (ties: lowest control-mesh index)."""
    if grid.argmax is None:
        raise ValueError("grid carries no argmax table")
    if spec is not None and grid.metadata.get("spec_hash") not in (None, spec.spec_hash()):
        raise ValueError("grid was solved for a different problem")
    if level is not None and grid.metadata.get("control_level") not in (None, level):
        raise ValueError(f"grid was solved at control level {grid.metadata['control_level']}, not {level}")
    return TablePolicy(grid)


# ---------------------------------------------------------------- estimator


class ValueFunctionSolver(BaseEstimator):
    """Estimator interface to :func:`solve`.

    ``fit(spec)`` solves on a grid with ``n_nodes`` per axis (or the given
    ``spacing``) and ``n_steps`` time steps (CFL-minimal when ``None``);
    ``predict(X)`` interpolates v at rows ``(t, x_1..x_d)``.
    """

    def __init__(self, n_nodes=None, spacing=None, n_steps=None, level=None, store_every=None,
                 max_slices=2001, bounds=None, truncation=10.0):
        self.n_nodes = n_nodes
        self.spacing = spacing
        self.n_steps = n_steps
        self.level = level
        self.store_every = store_every
        self.max_slices = max_slices
        self.bounds = bounds
        self.truncation = truncation

    def fit(self, spec, y=None):
        space = SpaceGrid.from_domain(spec.domain, self.n_nodes, self.spacing, self.bounds,
                                      self.truncation)
        n = self.n_steps if self.n_steps is not None else cfl_steps(spec, space, self.level)
        mesh = TimeMesh(0.0, spec.T, int(n))
        self.spec_ = spec
        self.grid_ = solve(spec, space, mesh, self.level, self.store_every, self.max_slices)
        self.policy_ = TablePolicy(self.grid_)
        return self

    def predict(self, X):
        check_is_fitted(self, "grid_")
        X = check_points(X, self.spec_.d)
        return self.grid_.evaluate(X[:, 0], X[:, 1:])

    def metadata_json(self):
        check_is_fitted(self, "grid_")
        return json.dumps(self.grid_.metadata, sort_keys=True, indent=2)
