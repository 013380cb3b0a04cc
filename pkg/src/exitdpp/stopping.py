"""Stopping rules and half-open cover cells.

Both are used by the path simulator (stitched policies switch at a stopping
rule and pick a cell) and by the DPP harness, so they live below both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import Domain


class StoppingRule:
    """Non-anticipating rule; ``theta = first triggering mesh index, capped by tau``.

    ``triggered(k, mesh, X)`` reports, for each row of ``X`` (the states at
    mesh index ``k``), whether the rule fires at ``k``. It only looks at the
    current index and state, so the realized time depends on the path up to
    theta only.
    """

    def triggered(self, k, mesh, X):
        raise NotImplementedError

    def describe(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(StoppingRule):
    """theta = s ^ tau, with s snapped down to the mesh."""

    s: float

    def triggered(self, k, mesh, X):
        return np.full(len(X), k >= mesh.index_of(min(max(self.s, mesh.t0), mesh.T)))

    def describe(self):
        return f"Constant({self.s!r})"


@dataclass(frozen=True)
class FirstHit(StoppingRule):
    """theta = first mesh time the state leaves ``subdomain``, capped by tau."""

    subdomain: Domain

    def triggered(self, k, mesh, X):
        return ~self.subdomain.contains(X)

    def describe(self):
        return f"FirstHit({self.subdomain.describe()})"


@dataclass(frozen=True)
class MinOf(StoppingRule):
    rules: tuple

    def __init__(self, rules):
        object.__setattr__(self, "rules", tuple(rules))

    def triggered(self, k, mesh, X):
        out = np.zeros(len(X), dtype=bool)
        for r in self.rules:
            out |= r.triggered(k, mesh, X)
        return out

    def describe(self):
        return "MinOf(" + ", ".join(r.describe() for r in self.rules) + ")"


def realize(rule, states, mesh, domain, start_index=0):
    """Mesh index of theta on a recorded path (``states`` of shape (n_steps+1, d)).

    The first index ``k >= start_index`` where the rule fires or the state is
    outside ``domain``; ``n_steps`` if neither happens.
    """
    states = np.asarray(states, dtype=float)
    for k in range(start_index, mesh.n_steps + 1):
        X = states[k:k + 1]
        if not domain.contains(X)[0] or rule.triggered(k, mesh, X)[0]:
            return k
    return mesh.n_steps


# ---------------------------------------------------------------- cover cells


@dataclass(frozen=True)
class HalfOpenCell:
    """Basis set ``B(t_i, x_i; r_i) = (t_i - r_i, t_i] x {|x' - x_i| < r_i}``
    minus the union of the cells listed in ``predecessors`` (by index in the
    owning :class:`Cover`)."""

    t: float
    x: tuple
    radius: float
    index: int = 0

    @property
    def predecessors(self):
        return range(self.index)

    def in_ball(self, t, X):
        t = np.asarray(t, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        in_time = (t > self.t - self.radius) & (t <= self.t)
        return in_time & (np.linalg.norm(X - np.asarray(self.x), axis=1) < self.radius)


class Cover:
    """Ordered cells ``A_1 = B_1``, ``A_i = B_i \\ (A_1 u ... u A_{i-1})``."""

    def __init__(self, cells):
        self.cells = [HalfOpenCell(c.t, tuple(c.x), c.radius, i) for i, c in enumerate(cells)]
        if self.cells:
            self._t = np.array([c.t for c in self.cells])
            self._x = np.array([c.x for c in self.cells], dtype=float)
            self._r = np.array([c.radius for c in self.cells])

    def __len__(self):
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    def __getitem__(self, i):
        return self.cells[i]

    def owner(self, t, X):
        """Index of the unique cell containing each point, -1 if uncovered."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(X),))
        out = np.full(len(X), -1, dtype=np.int64)
        todo = np.arange(len(X))
        for i, cell in enumerate(self.cells):
            if todo.size == 0:
                break
            hit = cell.in_ball(t[todo], X[todo])
            out[todo[hit]] = i
            todo = todo[~hit]
        return out

    def member(self, i, t, X):
        """Membership in ``A_i`` by its definition (ball minus predecessors)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        inside = self.cells[i].in_ball(t, X)
        for j in self.cells[i].predecessors:
            inside &= ~self.cells[j].in_ball(t, X)
        return inside

    def membership(self, t, X):
        """Boolean matrix (cells, points) of ``A_i`` membership, all cells at once."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(X),))
        balls = np.stack([c.in_ball(t, X) for c in self.cells]) if self.cells else np.zeros((0, len(X)), bool)
        earlier = np.zeros_like(balls)
        if len(balls) > 1:
            earlier[1:] = np.logical_or.accumulate(balls[:-1], axis=0)
        return balls & ~earlier

    def describe(self):
        return [{"t": c.t, "x": list(c.x), "radius": c.radius} for c in self.cells]
