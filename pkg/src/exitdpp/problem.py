"""Exit-time control problems: domain, horizon, coefficients, nested control sets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .expr import Compiled, EvaluationError, ExpressionError

DOMAIN_KINDS = ("box", "ball", "halfspace", "expression")


class ProblemError(ValueError):
    """Structurally invalid problem data."""


class CoefficientError(ValueError):
    """A coefficient evaluated to something unusable (non-finite, negative reward)."""


# ---------------------------------------------------------------- domain


@dataclass(frozen=True)
class Domain:
    """Open set G. Membership always uses strict inequalities.

    box:        G = prod_j (lower_j, upper_j); bounds may be infinite
    ball:       G = {|x - center| < radius}
    halfspace:  G = {normal . x < offset}
    expression: G = {phi(x) > 0}; ``lipschitz`` bounds the Lipschitz constant
                of phi and turns phi/L into a certified distance lower bound.
                ``lower``/``upper`` give a bounding box for grids.
    """

    kind: str
    dim: int
    lower: tuple = ()
    upper: tuple = ()
    center: tuple = ()
    radius: float = 0.0
    normal: tuple = ()
    offset: float = 0.0
    phi: str = ""
    lipschitz: float = 1.0

    @classmethod
    def box(cls, lower, upper):
        lower = tuple(float(v) for v in np.atleast_1d(lower))
        upper = tuple(float(v) for v in np.atleast_1d(upper))
        if len(lower) != len(upper):
            raise ProblemError("box corners have different dimensions")
        return cls("box", len(lower), lower=lower, upper=upper)

    @classmethod
    def ball(cls, center, radius):
        center = tuple(float(v) for v in np.atleast_1d(center))
        return cls("ball", len(center), center=center, radius=float(radius))

    @classmethod
    def halfspace(cls, normal, offset):
        normal = tuple(float(v) for v in np.atleast_1d(normal))
        return cls("halfspace", len(normal), normal=normal, offset=float(offset))

    @classmethod
    def expression(cls, phi, dim, lipschitz=1.0, lower=None, upper=None):
        lower = tuple(float(v) for v in lower) if lower is not None else (-np.inf,) * dim
        upper = tuple(float(v) for v in upper) if upper is not None else (np.inf,) * dim
        dom = cls("expression", int(dim), lower=lower, upper=upper, phi=phi,
                  lipschitz=float(lipschitz))
        dom._phi  # parse eagerly so syntax errors surface at construction
        return dom

    @property
    def _phi(self):
        cache = self.__dict__.get("_phi_cache")
        if cache is None:
            cache = Compiled(self.phi, self.dim, 0)
            object.__setattr__(self, "_phi_cache", cache)
        return cache

    def _rows(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, self.dim) if x.ndim <= 1 else x

    def signed_gap(self, x):
        """Positive inside G, <= 0 outside; equals the distance to G^c inside
        for box/ball/halfspace and phi/L for expression domains."""
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        X = self._rows(x)
        if self.kind == "box":
            lo = np.asarray(self.lower)
            hi = np.asarray(self.upper)
            with np.errstate(invalid="ignore"):
                g = np.minimum(X - lo, hi - X).min(axis=1)
        elif self.kind == "ball":
            g = self.radius - np.linalg.norm(X - np.asarray(self.center), axis=1)
        elif self.kind == "halfspace":
            n = np.asarray(self.normal)
            g = (self.offset - X @ n) / np.linalg.norm(n)
        elif self.kind == "expression":
            g = self._phi(0.0, X) / self.lipschitz
        else:
            raise ProblemError(f"unknown domain kind {self.kind!r}")
        return float(g[0]) if single else g

    def contains(self, x):
        g = self.signed_gap(x)
        return g > 0

    def distance(self, x):
        """rho(x, G^c): exact for box/ball/halfspace, a lower bound otherwise."""
        g = self.signed_gap(x)
        return max(g, 0.0) if np.ndim(g) == 0 else np.maximum(g, 0.0)

    def bounds(self):
        """Axis-aligned bounding box of G (entries may be infinite)."""
        if self.kind in ("box", "expression"):
            return np.asarray(self.lower, dtype=float), np.asarray(self.upper, dtype=float)
        if self.kind == "ball":
            c = np.asarray(self.center)
            return c - self.radius, c + self.radius
        n = np.asarray(self.normal)
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        nz = np.flatnonzero(n)
        if len(nz) == 1:  # axis-aligned halfspace
            j = nz[0]
            if n[j] > 0:
                hi[j] = self.offset / n[j]
            else:
                lo[j] = self.offset / n[j]
        return lo, hi

    def faces(self):
        """Flat faces as (unit_normal, offset) pairs with G on the side normal.x < offset."""
        if self.kind == "halfspace":
            n = np.asarray(self.normal)
            s = np.linalg.norm(n)
            return [(n / s, self.offset / s)]
        if self.kind == "box":
            out = []
            for j in range(self.dim):
                e = np.zeros(self.dim)
                e[j] = 1.0
                if np.isfinite(self.upper[j]):
                    out.append((e, self.upper[j]))
                if np.isfinite(self.lower[j]):
                    out.append((-e, -self.lower[j]))
            return out
        raise ProblemError(f"flat faces are only defined for box and halfspace, not {self.kind}")

    def describe(self):
        d = {"kind": self.kind, "dim": self.dim}
        if self.kind in ("box", "expression"):
            d.update(lower=list(self.lower), upper=list(self.upper))
        if self.kind == "ball":
            d.update(center=list(self.center), radius=self.radius)
        if self.kind == "halfspace":
            d.update(normal=list(self.normal), offset=self.offset)
        if self.kind == "expression":
            d.update(phi=self.phi, lipschitz=self.lipschitz)
        return d


# ---------------------------------------------------------------- controls


@dataclass(frozen=True)
class ControlSpace:
    """Nested boxes U(1) <= U(2) <= ... in R^m with a finite mesh per level.

    Levels are numbered from 1. A mesh count of 1 on an axis puts the single
    mesh point at the midpoint of that axis.
    """

    dim: int
    lower: tuple  # one tuple of length dim per level
    upper: tuple
    mesh_counts: tuple

    @classmethod
    def from_levels(cls, levels, mesh_counts=None):
        """``levels`` is a list of ``(lower, upper)`` pairs."""
        if not levels:
            return cls(0, ((),), ((),), ((),))
        lower = tuple(tuple(float(v) for v in np.atleast_1d(lo)) for lo, _ in levels)
        upper = tuple(tuple(float(v) for v in np.atleast_1d(hi)) for _, hi in levels)
        dim = len(lower[0])
        if mesh_counts is None:
            mesh_counts = [[3] * dim for _ in levels]
        counts = tuple(tuple(int(c) for c in np.atleast_1d(mc)) for mc in mesh_counts)
        return cls(dim, lower, upper, counts)

    @property
    def n_levels(self):
        return len(self.lower)

    def _check_level(self, level):
        if not 1 <= level <= self.n_levels:
            raise ProblemError(f"control level {level} outside 1..{self.n_levels}")
        return level - 1

    def box(self, level):
        i = self._check_level(level)
        return np.asarray(self.lower[i], dtype=float), np.asarray(self.upper[i], dtype=float)

    def mesh(self, level):
        """Mesh points of U(level), shape ``(K, m)``, lexicographic order."""
        i = self._check_level(level)
        if self.dim == 0:
            return np.zeros((1, 0))
        axes = []
        for lo, hi, c in zip(self.lower[i], self.upper[i], self.mesh_counts[i]):
            axes.append(np.array([(lo + hi) / 2.0]) if c == 1 else np.linspace(lo, hi, c))
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def pitch(self, level):
        """Largest mesh spacing over the axes of U(level) (0 for single points)."""
        i = self._check_level(level)
        out = 0.0
        for lo, hi, c in zip(self.lower[i], self.upper[i], self.mesh_counts[i]):
            if c > 1:
                out = max(out, (hi - lo) / (c - 1))
        return out

    def clamp(self, u, level):
        if self.dim == 0:
            return np.asarray(u, dtype=float)
        lo, hi = self.box(level)
        return np.clip(u, lo, hi)


# ---------------------------------------------------------------- coefficients


def _as_text_matrix(diffusion, d):
    """A flat list of d strings is the diagonal; nested lists are the full matrix."""
    if isinstance(diffusion, str):
        diffusion = [diffusion]
    diffusion = list(diffusion)
    if diffusion and all(isinstance(r, str) for r in diffusion):
        if len(diffusion) != d:
            raise ProblemError(f"diagonal diffusion needs {d} entries, got {len(diffusion)}")
        return [[diffusion[i] if i == j else "0" for j in range(d)] for i in range(d)]
    rows = [list(r) for r in diffusion]
    if len(rows) != d or any(len(r) != d for r in rows):
        raise ProblemError(f"diffusion must be a {d}x{d} matrix of expressions")
    return rows


class CoefficientSet:
    """Drift b (d entries), diffusion sigma (d x d) and reward f >= 0."""

    def __init__(self, drift, diffusion, reward, control_dim=0):
        drift = [drift] if isinstance(drift, str) else list(drift)
        self.d = len(drift)
        self.m = int(control_dim)
        if self.d == 0:
            raise ProblemError("drift must have at least one component")
        self.drift_text = tuple(drift)
        self.diffusion_text = tuple(tuple(r) for r in _as_text_matrix(diffusion, self.d))
        self.reward_text = str(reward)
        self.b = [Compiled(s, self.d, self.m) for s in self.drift_text]
        self.sigma = [[Compiled(s, self.d, self.m) for s in row] for row in self.diffusion_text]
        self.f = Compiled(self.reward_text, self.d, self.m)

    @property
    def all_expressions(self):
        yield from (("b", i, e) for i, e in enumerate(self.b))
        for i, row in enumerate(self.sigma):
            yield from (("sigma", (i, j), e) for j, e in enumerate(row))
        yield ("f", None, self.f)

    def uses_time(self):
        return any(e.uses_t for _, _, e in self.all_expressions)

    def drift(self, t, X, U):
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape)
        for i, e in enumerate(self.b):
            out[:, i] = e(t, X, U)
        return out

    def diffusion(self, t, X, U):
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape + (self.d,))
        for i, row in enumerate(self.sigma):
            for j, e in enumerate(row):
                out[:, i, j] = e(t, X, U)
        return out

    def reward(self, t, X, U):
        return self.f(t, X, U)

    def is_diagonal(self):
        """True when the diffusion matrix is syntactically diagonal."""
        return all(self.diffusion_text[i][j].strip() in ("0", "0.0")
                   for i in range(self.d) for j in range(self.d) if i != j)

    def describe(self):
        return {"drift": list(self.drift_text),
                "diffusion": [list(r) for r in self.diffusion_text],
                "reward": self.reward_text}


# ---------------------------------------------------------------- spec


@dataclass
class ProblemSpec:
    horizon: float
    domain: Domain
    coefficients: CoefficientSet
    control_space: ControlSpace
    envelope: float = 10.0  # sampling envelope radius for runtime checks
    name: str = field(default="")

    @property
    def T(self):
        return float(self.horizon)

    @property
    def d(self):
        return self.coefficients.d

    @property
    def m(self):
        return self.control_space.dim

    def spec_hash(self):
        payload = {
            "horizon": float(self.horizon),
            "domain": self.domain.describe(),
            "coefficients": self.coefficients.describe(),
            "control_space": {"dim": self.control_space.dim,
                              "lower": [list(v) for v in self.control_space.lower],
                              "upper": [list(v) for v in self.control_space.upper],
                              "mesh_counts": [list(v) for v in self.control_space.mesh_counts]},
        }
        blob = json.dumps(payload, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_reward(self, values, t, X, U):
        """Hard error if f < 0 anywhere in ``values``."""
        bad = np.flatnonzero(values < 0)
        if bad.size:
            i = bad[0]
            tt = t if np.ndim(t) == 0 else np.asarray(t)[i]
            raise CoefficientError(
                f"f negative at sample (t={float(tt)}, x={np.asarray(X)[i].tolist()}, "
                f"u={np.asarray(U)[i].tolist() if np.size(U) else []}): {values[i]}")


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self):
        return not self.violations

    def __iter__(self):
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)


def _sample_points(spec, level, n, seed, stream_offset=0):
    """Deterministic (t, x, u) samples: t in [0,T], x in the envelope box, u in U(level)."""
    d, m = spec.d, spec.m
    ids = np.arange(n) + stream_offset * n
    cols = rng.uniforms(seed, rng.SAMPLING, ids, np.arange(1 + 2 * d + m) + 7919 * level)
    t = cols[:, 0] * spec.T
    R = spec.envelope
    x = -R + 2 * R * cols[:, 1:1 + d]
    y = -R + 2 * R * cols[:, 1 + d:1 + 2 * d]
    if m:
        lo, hi = spec.control_space.box(level)
        u = lo + (hi - lo) * cols[:, 1 + 2 * d:]
    else:
        u = np.zeros((n, 0))
    return t, x, y, u


def validate(spec, n_samples=1000, seed=0):
    """Return a :class:`ValidationReport` listing every violated structural invariant."""
    out = []
    if not np.isfinite(spec.horizon) or spec.horizon <= 0:
        out.append(f"horizon T must be positive, got {spec.horizon}")
    dom = spec.domain
    cs = spec.control_space
    coef = spec.coefficients
    if dom.dim != coef.d:
        out.append(f"dimension mismatch: domain has d={dom.dim}, drift has d={coef.d}")
    if cs.dim != coef.m:
        out.append(f"dimension mismatch: control space has m={cs.dim}, coefficients use m={coef.m}")
    if dom.kind == "box" and any(lo >= hi for lo, hi in zip(dom.lower, dom.upper)):
        out.append("empty domain: box lower >= upper")
    if dom.kind == "ball" and not dom.radius > 0:
        out.append("empty domain: ball radius <= 0")
    if dom.kind == "halfspace" and not np.any(np.asarray(dom.normal)):
        out.append("empty domain: halfspace normal is zero")
    if dom.kind == "expression" and not dom.lipschitz > 0:
        out.append("expression domain needs a positive lipschitz bound")

    for i in range(cs.n_levels):
        lo = np.asarray(cs.lower[i])
        hi = np.asarray(cs.upper[i])
        if len(lo) != cs.dim or len(hi) != cs.dim or len(cs.mesh_counts[i]) != cs.dim:
            out.append(f"control level {i + 1} has wrong dimension")
            continue
        if np.any(lo > hi):
            out.append(f"control level {i + 1} is an empty box")
        if any(c < 1 for c in cs.mesh_counts[i]):
            out.append(f"control level {i + 1}: mesh counts must be >= 1")
        if i + 1 < cs.n_levels:
            lo2 = np.asarray(cs.lower[i + 1])
            hi2 = np.asarray(cs.upper[i + 1])
            if lo2.shape == lo.shape and (np.any(lo < lo2) or np.any(hi > hi2)):
                out.append(f"levels not nested: U({i + 1}) is not contained in U({i + 2})")
    if out:
        return ValidationReport(out)

    t, x, _, u = _sample_points(spec, cs.n_levels, n_samples, seed)
    for name, idx, e in coef.all_expressions:
        label = name if idx is None else f"{name}{list(idx) if isinstance(idx, tuple) else [idx]}"
        try:
            vals = e(t, x, u)
        except EvaluationError as exc:
            out.append(f"{label} = {e.text!r} fails to evaluate: {exc}")
            continue
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            k = bad[0]
            out.append(f"{label} = {e.text!r} not finite at sample t={t[k]}, x={x[k].tolist()}")
            continue
        if name == "f":
            neg = np.flatnonzero(vals < 0)
            if neg.size:
                k = neg[0]
                out.append(f"f negative at sample t={t[k]}, x={x[k].tolist()}, "
                           f"u={u[k].tolist()}: f={vals[k]}")
    return ValidationReport(out)


def _checked(e, label, t, x, u):
    try:
        vals = e(t, x, u)
    except EvaluationError as exc:
        raise CoefficientError(f"{label} = {e.text!r}: {exc}") from exc
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        k = bad[0]
        raise CoefficientError(
            f"{label} = {e.text!r} is not finite at sample t={t[k]}, x={np.asarray(x)[k].tolist()}, "
            f"u={np.asarray(u)[k].tolist()}")
    return vals


def _coefficients(coef, t, x, u):
    b = np.stack([_checked(e, f"b[{i}]", t, x, u) for i, e in enumerate(coef.b)], axis=1)
    s = np.stack([_checked(e, f"sigma[{i},{j}]", t, x, u)
                  for i, row in enumerate(coef.sigma) for j, e in enumerate(row)], axis=1)
    return b, s


def estimate_lipschitz(spec, level, n_samples=10000, seed=0):
    """Sampled constants ``(K_lip, K_growth)`` for the coefficients on U(level).

    The sample set for ``level`` is the union of per-level blocks 1..level,
    so raising the level only adds samples and the estimates are monotone.
    Half of each block pairs x with an independent y; the other half puts y
    at a log-uniform distance in [1e-4, 1] from x, which is where
    difference quotients approach the local derivative.
    """
    coef = spec.coefficients
    spec.control_space.box(level)
    k_lip = 0.0
    k_growth = 0.0
    for lev in range(1, level + 1):
        t, x, y, u = _sample_points(spec, lev, n_samples, seed, stream_offset=1)
        half = n_samples // 2
        extra = rng.uniforms(seed, rng.SAMPLING, np.arange(n_samples - half) + 3 * n_samples,
                             np.arange(spec.d + 1) + 104729 * lev)
        direction = extra[:, 1:] - 0.5
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
        h = 10.0 ** (-4 * extra[:, :1])
        y[half:] = x[half:] + h * direction

        bx, sx = _coefficients(coef, t, x, u)
        by, sy = _coefficients(coef, t, y, u)
        dist = np.linalg.norm(x - y, axis=1)
        ok = dist > 0
        num = np.linalg.norm(bx - by, axis=1) + np.linalg.norm(sx - sy, axis=1)
        if ok.any():
            k_lip = max(k_lip, float(np.max(num[ok] / dist[ok])))
        growth = (np.linalg.norm(bx, axis=1) + np.linalg.norm(sx, axis=1)) / (
            1.0 + np.linalg.norm(x, axis=1))
        k_growth = max(k_growth, float(np.max(growth)))
    return k_lip, k_growth


# ---------------------------------------------------------------- construction


def make_spec(horizon, domain, drift, diffusion, reward, control_levels=(), mesh_counts=None,
              envelope=10.0, name=""):
    """Convenience constructor; ``control_levels`` is a list of (lower, upper)."""
    cs = ControlSpace.from_levels(list(control_levels), mesh_counts)
    coef = CoefficientSet(drift, diffusion, reward, cs.dim)
    return ProblemSpec(float(horizon), domain, coef, cs, envelope=float(envelope), name=name)


def interval(lo, hi):
    return Domain.box([lo], [hi])


__all__ = [
    "CoefficientError", "CoefficientSet", "ControlSpace", "Domain", "ExpressionError",
    "ProblemError", "ProblemSpec", "ValidationReport", "estimate_lipschitz", "interval",
    "make_spec", "validate",
]
