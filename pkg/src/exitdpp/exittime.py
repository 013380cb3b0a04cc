"""Exit times of discrete paths, distances to the complement, and the
neighbourhood certificate behind lower semicontinuity of the exit time."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng


class CertificateError(ValueError):
    pass


@dataclass(frozen=True)
class ExitResult:
    tau_index: int
    tau: float
    exited: bool
    tau_corrected: Optional[float] = None
    tau_corrected_index: Optional[int] = None


def distance_to_complement(x, domain):
    """rho(x, G^c); exact for box/ball/halfspace, a certified lower bound for
    expression domains. Zero for points outside G."""
    return domain.distance(x)


def exit_indices(states, domain, start_index=0):
    """First index ``k >= start_index`` with the state outside G, per path.

    ``states`` has shape (n, n_steps+1, d). Paths that never leave get
    ``n_steps``.
    """
    states = np.asarray(states, dtype=float)
    n, n1, d = states.shape
    start = np.broadcast_to(np.asarray(start_index, dtype=np.int64), (n,))
    outside = ~domain.contains(states.reshape(-1, d)).reshape(n, n1)
    outside &= np.arange(n1)[None, :] >= start[:, None]
    return np.where(outside.any(axis=1), outside.argmax(axis=1), n1 - 1)


def exit_time(path, domain, start_index=None):
    """Grid-point exit: first mesh index at or after ``start_index`` whose state
    is not in G (strict membership, so boundary points count as exited).

    Monitoring only at mesh points biases tau upward by O(sqrt(dt)).
    """
    start = path.start_index if start_index is None else start_index
    N = path.mesh.n_steps
    k = int(exit_indices(path.states[None], domain, start)[0])
    exited = k < N or not bool(domain.contains(path.states[N:N + 1])[0])
    return ExitResult(k, min(path.mesh.time(k), path.mesh.T), exited)


def bridge_crossing_probability(d0, d1, var_rate, dt):
    """Probability that a Brownian bridge with variance rate ``var_rate`` crosses a
    flat face, given its distances ``d0, d1 >= 0`` to the face at both ends."""
    d0 = np.maximum(d0, 0.0)
    d1 = np.maximum(d1, 0.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        expo = -2.0 * d0 * d1 / (var_rate * dt)
    expo = np.where(var_rate > 0, expo, np.where(d0 * d1 > 0, -np.inf, 0.0))
    return np.exp(expo)


def face_variance_rates(sigma, normals):
    """|sigma^T n|^2 per face; ``sigma`` has shape (n, d, d), normals (F, d)."""
    v = np.einsum("nij,fi->nfj", sigma, normals)
    return np.sum(v * v, axis=2)


def exit_time_bridge_corrected(path, domain, sigma_const=None, spec=None, start_index=None):
    """Exit time with a Brownian-bridge crossing test on every inside-inside step.

    For each step and face the crossing probability is
    ``exp(-2 d_k d_{k+1} / (s^2 dt))`` with ``s^2 = |sigma^T n|^2``. Pass
    ``sigma_const`` for a scalar diffusion (``s = sigma_const``), or ``spec``
    to evaluate sigma at the start of each step. Crossing events are drawn
    from the path's own counter stream, so the result is deterministic.
    """
    if domain.kind not in ("box", "halfspace"):
        raise ValueError(f"bridge correction supports box and halfspace domains, not {domain.kind!r}")
    if sigma_const is None and spec is None:
        raise ValueError("need sigma_const or spec to evaluate the diffusion")
    grid = exit_time(path, domain, start_index)
    start = path.start_index if start_index is None else start_index
    mesh = path.mesh
    faces = domain.faces()
    normals = np.array([n for n, _ in faces])
    offsets = np.array([c for _, c in faces])
    stop = grid.tau_index
    if stop <= start:
        return ExitResult(grid.tau_index, grid.tau, grid.exited, grid.tau, grid.tau_index)
    ks = np.arange(start, min(stop, mesh.n_steps))
    X0 = path.states[ks]
    X1 = path.states[ks + 1]
    d0 = offsets[None, :] - X0 @ normals.T
    d1 = offsets[None, :] - X1 @ normals.T
    if sigma_const is not None:
        rates = np.full(d0.shape, float(sigma_const) ** 2)
    else:
        sig = np.stack([spec.coefficients.diffusion(mesh.time(k), path.states[k:k + 1],
                                                    path.controls[k:k + 1])[0] for k in ks])
        rates = face_variance_rates(sig, normals)
    p = bridge_crossing_probability(d0, d1, rates, mesh.dt)
    u = np.stack([rng.uniforms(path.brownian.seed, rng.BRIDGE, [path.brownian.path_index], ks,
                               lane=f)[0] for f in range(len(faces))], axis=1)
    crossed = (u < p).any(axis=1)
    if crossed.any():
        k = int(ks[np.argmax(crossed)]) + 1
        return ExitResult(grid.tau_index, grid.tau, grid.exited, mesh.time(k), k)
    return ExitResult(grid.tau_index, grid.tau, grid.exited, grid.tau, grid.tau_index)


def semicontinuity_certificate(path, a, domain):
    """delta = min over mesh times t_k <= a of rho(X_k, G^c).

    Every path Y on the same mesh with ``max_k |Y_k - X_k| < delta / 2`` stays
    in G at all mesh times up to ``a`` and therefore exits after ``a``.
    Requires ``tau_G(path) > a`` with tau measured over the whole mesh; a
    path that never leaves G qualifies for every ``a <= T``.
    """
    res = exit_time(path, domain, start_index=0)
    if res.exited and not res.tau > a:
        raise CertificateError(f"path exits before a: tau={res.tau} <= a={a}")
    times = path.mesh.times
    upto = times <= a
    return float(np.min(domain.distance(path.states[upto])))
