"""Euler-Maruyama paths of the controlled SDE, path concatenation and policy shifting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .expr import Compiled
from .stopping import Cover

SNAP_TOL = 1e-9


class SimulationError(RuntimeError):
    pass


class StitchError(RuntimeError):
    """A stitched policy switched at a point no cover cell owns."""

    def __init__(self, t, x):
        self.point = (float(t), [float(v) for v in np.atleast_1d(x)])
        super().__init__(f"(theta, X_theta) = {self.point} lies in no cover cell")


# ---------------------------------------------------------------- meshes and noise


@dataclass(frozen=True)
class TimeMesh:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1 or not self.T > self.t0:
            raise ValueError(f"bad time mesh: t0={self.t0}, T={self.T}, n_steps={self.n_steps}")

    @property
    def dt(self):
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self):
        out = self.t0 + self.dt * np.arange(self.n_steps + 1)
        out[-1] = self.T
        return out

    def time(self, k):
        return self.T if k == self.n_steps else self.t0 + self.dt * k

    def index_of(self, t):
        """Mesh index of ``t``, rounding down (with a 1e-9 relative snap tolerance)."""
        k = int(np.floor((t - self.t0) / self.dt + SNAP_TOL))
        return min(max(k, 0), self.n_steps)

    def indices_of(self, t):
        k = np.floor((np.asarray(t, dtype=float) - self.t0) / self.dt + SNAP_TOL).astype(np.int64)
        return np.clip(k, 0, self.n_steps)


@dataclass
class BrownianPath:
    """Increments ``dW_k`` on ``mesh``; generated from (seed, path_index, k) unless given."""

    mesh: TimeMesh
    increments: np.ndarray
    seed: int = 0
    path_index: int = 0

    @classmethod
    def generate(cls, mesh, d, seed, path_index=0, stream=rng.BROWNIAN):
        z = rng.normals(seed, stream, [path_index], np.arange(mesh.n_steps), d)[0]
        return cls(mesh, z * np.sqrt(mesh.dt), int(seed), int(path_index))

    @classmethod
    def from_trajectory(cls, mesh, W, seed=0, path_index=0):
        W = np.asarray(W, dtype=float)
        if W.shape[0] != mesh.n_steps + 1:
            raise ValueError("trajectory length does not match the mesh")
        return cls(mesh, np.diff(W, axis=0), seed, path_index)

    @property
    def d(self):
        return self.increments.shape[1]

    def trajectory(self):
        """``W_k`` with ``W_0 = 0``, shape (n_steps+1, d)."""
        out = np.zeros((self.mesh.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def brownian_increments(mesh, d, seed, path_ids, k_start=0, k_stop=None, stream=rng.BROWNIAN):
    """Increments for many paths, shape (len(path_ids), k_stop-k_start, d)."""
    k_stop = mesh.n_steps if k_stop is None else k_stop
    z = rng.normals(seed, stream, path_ids, np.arange(k_start, k_stop), d)
    return z * np.sqrt(mesh.dt)


# ---------------------------------------------------------------- policies


class ControlPolicy:
    """Maps (mesh index, time, states) to controls, shape (n, m).

    Policies that need per-path memory (stitched ones) return it from
    :meth:`start` and receive it back in :meth:`controls`; stateless ones
    return ``None``.
    """

    stateful = False

    def start(self, n, k0, mesh):
        return None

    def controls(self, k, t, X, state):
        raise NotImplementedError

    def compact(self, state, keep):
        return state

    def describe(self):
        return type(self).__name__


class Feedback(ControlPolicy):
    """u = g(t, x) with one expression per control component."""

    def __init__(self, exprs, d):
        exprs = [exprs] if isinstance(exprs, str) else list(exprs)
        self.texts = tuple(exprs)
        self.d = d
        self.g = [Compiled(s, d, 0) for s in exprs]

    @property
    def m(self):
        return len(self.g)

    def controls(self, k, t, X, state):
        out = np.empty((len(X), len(self.g)))
        for j, e in enumerate(self.g):
            out[:, j] = e(t, X)
        return out

    def describe(self):
        return "Feedback(" + ", ".join(self.texts) + ")"

    def __eq__(self, other):
        return isinstance(other, Feedback) and (self.texts, self.d) == (other.texts, other.d)

    def __hash__(self):
        return hash((self.texts, self.d))


def zero_policy(d, m):
    return Feedback(["0"] * m, d)


class OpenLoop(ControlPolicy):
    """Row ``j`` of ``table`` is applied on mesh interval ``offset + j``."""

    def __init__(self, table, offset=0):
        self.table = np.atleast_2d(np.asarray(table, dtype=float))
        self.offset = int(offset)

    def controls(self, k, t, X, state):
        j = k - self.offset
        if not 0 <= j < len(self.table):
            raise SimulationError(f"open-loop table has no row for mesh interval {k}")
        return np.broadcast_to(self.table[j], (len(X), self.table.shape[1])).copy()

    def describe(self):
        return f"OpenLoop(rows={len(self.table)}, offset={self.offset})"


class Stitched(ControlPolicy):
    """``base`` before theta, then the policy of the cell owning (theta, X_theta).

    theta is the first index at which ``rule`` fires or the state leaves
    ``domain``. If it leaves the domain first, theta = tau and the suffix has
    no effect on the reward, so the base policy simply continues. Cell
    policies must be stateless.
    """

    stateful = True

    def __init__(self, base, rule, cover, cell_policies, domain):
        if not isinstance(cover, Cover):
            cover = Cover(cover)
        if len(cell_policies) != len(cover):
            raise ValueError("need exactly one policy per cover cell")
        if base.stateful or any(p.stateful for p in cell_policies):
            raise ValueError("base and cell policies of a stitched policy must be stateless")
        self.base = base
        self.rule = rule
        self.cover = cover
        self.cell_policies = list(cell_policies)
        self.domain = domain

    def start(self, n, k0, mesh):
        return {"k0": np.broadcast_to(np.asarray(k0, dtype=np.int64), (n,)).copy(),
                "decided": np.zeros(n, dtype=bool),
                "cell": np.full(n, -1, dtype=np.int64),
                "theta": np.full(n, -1, dtype=np.int64),
                "mesh": mesh}

    def compact(self, state, keep):
        return {k: (v[keep] if isinstance(v, np.ndarray) else v) for k, v in state.items()}

    def controls(self, k, t, X, state):
        mesh = state["mesh"]
        pending = ~state["decided"] & (state["k0"] <= k)
        if pending.any():
            idx = np.flatnonzero(pending)
            Xp = X[idx]
            inside = self.domain.contains(Xp)
            fire = self.rule.triggered(k, mesh, Xp)
            stop = fire | ~inside
            switch = idx[fire & inside]
            if switch.size:
                owner = self.cover.owner(t, X[switch])
                if (owner < 0).any():
                    raise StitchError(t, X[switch[np.argmax(owner < 0)]])
                state["cell"][switch] = owner
            state["decided"][idx[stop]] = True
            state["theta"][idx[stop]] = k
        out = self.base.controls(k, t, X, None)
        cells = state["cell"]
        for c in np.unique(cells[cells >= 0]):
            rows = np.flatnonzero(cells == c)
            out[rows] = self.cell_policies[c].controls(k, t, X[rows], None)
        return out

    def describe(self):
        return f"Stitched(base={self.base.describe()}, rule={self.rule.describe()}, cells={len(self.cover)})"


# ---------------------------------------------------------------- simulation


def euler_step(spec, mesh, k, X, U, dW):
    """One Euler-Maruyama step from mesh index ``k`` for a batch of states."""
    t = mesh.time(k)
    coef = spec.coefficients
    b = coef.drift(t, X, U)
    s = coef.diffusion(t, X, U)
    if spec.d == 1:
        return X + b * mesh.dt + s[:, :, 0] * dW
    return X + b * mesh.dt + np.einsum("nij,nj->ni", s, dW)


@dataclass
class SamplePath:
    mesh: TimeMesh
    states: np.ndarray  # (n_steps+1, d)
    controls: np.ndarray  # (n_steps, m); NaN before the start index
    brownian: BrownianPath
    t: float
    x: np.ndarray
    start_index: int
    theta_index: int = field(default=-1)  # switch index for stitched policies

    def to_csv(self, path_or_file):
        """Write columns k, t_k, X_1..X_d, u_1..u_m (controls blank at k = n_steps)."""
        d = self.states.shape[1]
        m = self.controls.shape[1]
        close = False
        if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
            fh = open(path_or_file, "w", newline="")
            close = True
        else:
            fh = path_or_file
        try:
            w = csv.writer(fh)
            w.writerow(["k", "t_k"] + [f"X_{i + 1}" for i in range(d)] + [f"u_{j + 1}" for j in range(m)])
            times = self.mesh.times
            for k in range(self.mesh.n_steps + 1):
                u = self.controls[k] if k < self.mesh.n_steps else [np.nan] * m
                w.writerow([k, repr(float(times[k]))] + [repr(float(v)) for v in self.states[k]]
                           + ["" if np.isnan(v) else repr(float(v)) for v in u])
        finally:
            if close:
                fh.close()


def simulate_batch(spec, mesh, x0, k0, policy, increments, level=None):
    """Simulate a batch on given increments; returns (states, controls, state).

    ``x0`` has shape (n, d), ``k0`` is a start index (scalar or per path),
    ``increments`` has shape (n, n_steps, d). States before each start index
    are frozen at the start point; controls there are NaN.
    """
    level = spec.control_space.n_levels if level is None else level
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x0.shape
    m = spec.m
    N = mesh.n_steps
    k0 = np.broadcast_to(np.asarray(k0, dtype=np.int64), (n,))
    states = np.empty((n, N + 1, d))
    controls = np.full((n, N, m), np.nan)
    states[:, 0] = x0
    X = x0.copy()
    pstate = policy.start(n, k0, mesh)
    first = int(k0.min()) if n else N
    states[:, :first + 1] = x0[:, None, :]
    for k in range(first, N):
        active = k0 <= k
        t = mesh.time(k)
        U = spec.control_space.clamp(policy.controls(k, t, X, pstate), level)
        if U.shape != (n, m):
            raise SimulationError(f"policy produced controls of shape {U.shape}, expected {(n, m)}")
        Xn = euler_step(spec, mesh, k, X, U, increments[:, k])
        if not np.isfinite(Xn[active]).all():
            raise SimulationError(f"non-finite state at step {k} (t={t})")
        X = np.where(active[:, None], Xn, X)
        controls[active, k] = U[active]
        states[:, k + 1] = X
    return states, controls, pstate


def simulate(spec, t, x, policy, bp, level=None):
    """Simulate one path from ``(t, x)`` driven by ``bp``.

    ``t`` is snapped down to the mesh of ``bp``.
    """
    mesh = bp.mesh
    k0 = mesh.index_of(t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (spec.d,):
        raise ValueError(f"start point has shape {x.shape}, expected ({spec.d},)")
    states, controls, pstate = simulate_batch(spec, mesh, x[None, :], k0, policy,
                                              bp.increments[None], level)
    theta = int(pstate["theta"][0]) if isinstance(pstate, dict) and "theta" in pstate else -1
    return SamplePath(mesh, states[0], controls[0], bp, float(mesh.time(k0)), x, k0, theta)


# ---------------------------------------------------------------- concatenation


def _as_trajectory(w):
    if isinstance(w, BrownianPath):
        return w.mesh, w.trajectory()
    return None, np.asarray(w, dtype=float)


def concatenate(w, w2, theta_index):
    """``(w (x)_theta w2)(u)``: ``w`` up to ``t_theta``, then the increments of ``w2``.

    Accepts :class:`BrownianPath` objects or trajectory arrays of shape
    (n_steps+1, d); returns the trajectory array.
    """
    mesh1, a = _as_trajectory(w)
    mesh2, b = _as_trajectory(w2)
    if a.shape != b.shape or (mesh1 is not None and mesh2 is not None and mesh1 != mesh2):
        raise ValueError("mesh mismatch: trajectories must live on the same mesh")
    if not 0 <= theta_index < a.shape[0]:
        raise ValueError(f"theta_index {theta_index} is not a mesh index")
    out = a.copy()
    out[theta_index + 1:] = b[theta_index + 1:] - b[theta_index] + a[theta_index]
    return out


def shift_policy(policy, theta_index, prefix):
    """The policy seen by the suffix noise after splicing at ``theta_index``."""
    if isinstance(policy, OpenLoop):
        start = theta_index - policy.offset
        return OpenLoop(policy.table[max(start, 0):], offset=max(theta_index, policy.offset))
    if isinstance(policy, Stitched):
        mesh = prefix.mesh
        for j in range(prefix.start_index, theta_index + 1):
            Xj = prefix.states[j:j + 1]
            if not policy.domain.contains(Xj)[0]:
                return shift_policy(policy.base, theta_index, prefix)
            if policy.rule.triggered(j, mesh, Xj)[0]:
                cell = policy.cover.owner(mesh.time(j), Xj)[0]
                if cell < 0:
                    raise StitchError(mesh.time(j), Xj[0])
                return shift_policy(policy.cell_policies[cell], theta_index, prefix)
        return Stitched(shift_policy(policy.base, theta_index, prefix), policy.rule,
                        policy.cover, policy.cell_policies, policy.domain)
    # state feedback (expressions or lookup tables) does not depend on the past
    return policy


def check_flow_property(spec, t, x, policy, bp1, bp2, theta_index, level=None):
    """Max discrepancy over ``u >= t_theta`` between the path driven by the
    concatenated noise and the path restarted at ``(t_theta, X_theta)`` with
    the shifted policy on the suffix noise."""
    mesh = bp1.mesh
    if bp2.mesh != mesh:
        raise ValueError("mesh mismatch between the two Brownian paths")
    k0 = mesh.index_of(t)
    if theta_index < k0 or theta_index > mesh.n_steps:
        raise ValueError(f"theta_index {theta_index} outside [{k0}, {mesh.n_steps}]")
    if theta_index == mesh.n_steps:
        return 0.0
    spliced = BrownianPath.from_trajectory(mesh, concatenate(bp1, bp2, theta_index))
    path_a = simulate(spec, t, x, policy, spliced, level)
    prefix = simulate(spec, t, x, policy, bp1, level)
    shifted = shift_policy(policy, theta_index, prefix)
    path_b = simulate(spec, mesh.time(theta_index), prefix.states[theta_index], shifted, bp2, level)
    diff = path_a.states[theta_index:] - path_b.states[theta_index:]
    return float(np.max(np.linalg.norm(diff, axis=1)))


# ---------------------------------------------------------------- moment bound


def continuity_scaling_test(spec, policy, q, base, perturbations, n_paths, seed,
                            mesh=None, level=None, chunk=512):
    """Empirical ``E sup_u |X^{s,y}_u - X^{t,x}_u|^{2q}`` under common noise.

    ``base`` is ``(t, x)`` and each perturbation a ``(s, y)`` pair. Start
    times are snapped to the mesh and ``h`` is computed from the snapped
    times. Returns a list of ``(h, M_h)``.
    """
    mesh = mesh or TimeMesh(0.0, spec.T, 1000)
    t, x = base
    x = np.atleast_1d(np.asarray(x, dtype=float))
    kt = mesh.index_of(t)
    t_snap = mesh.time(kt)
    out = []
    for s, y in perturbations:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ks = mesh.index_of(s)
        s_snap = mesh.time(ks)
        h = float(np.sqrt((s_snap - t_snap) ** 2 + np.sum((y - x) ** 2)))
        total = []
        for c0 in range(0, n_paths, chunk):
            ids = np.arange(c0, min(c0 + chunk, n_paths))
            dW = brownian_increments(mesh, spec.d, seed, ids)
            n = len(ids)
            xs = np.vstack([np.broadcast_to(x, (n, spec.d)), np.broadcast_to(y, (n, spec.d))])
            ks_all = np.concatenate([np.full(n, kt), np.full(n, ks)])
            states, _, _ = simulate_batch(spec, mesh, xs, ks_all, policy,
                                          np.concatenate([dW, dW]), level)
            gap = np.linalg.norm(states[n:] - states[:n], axis=2).max(axis=1)
            total.append(gap ** (2 * q))
        vals = np.concatenate(total)
        out.append((h, float(np.mean(vals))))
    return out
