"""Deterministic oracles for the limit equation.

The homogeneous speed marginal F(t, r) of the limit process evolves under a
loss rate sigma*r and a gain from faster speeds; mass leaving through zero
speed accumulates in the stopped mass at rate lambda_F. This module provides

* the per-collision stopping probability k(u),
* the stopping rate lambda_F of a speed law,
* the backward (mild-solution) recursion for E[phi(speed at t)],
* a forward solver for F on a speed grid with a stopped-mass bucket.

lambda_F carries the factor sigma: it is the loss rate sigma*r weighted by
k(r), which is what keeps moving + stopped mass constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .analysis import SpeedDistribution
from .micro import ModelParams
from .profile import SlowingProfile

__all__ = [
    "NumericContractError",
    "CollisionKernel",
    "k_of_u",
    "lambda_F",
    "BackwardResult",
    "backward_expectation",
    "backward_expectation_direct",
    "SpeedGrid",
    "ForwardSolution",
    "solve_forward",
]

W_NODES = 64


class NumericContractError(RuntimeError):
    """A numerical precondition (e.g. time-step stability) is violated."""


@dataclass(frozen=True)
class CollisionKernel:
    """Collision law of the limit process for one profile and parameter set."""

    profile: SlowingProfile
    kappa: float
    d: int
    sigma: float

    @classmethod
    def from_params(cls, profile: SlowingProfile, params: ModelParams) -> "CollisionKernel":
        return cls(profile, params.kappa, params.d, params.sigma)

    def threshold(self, h):
        """c(h) = a^{-1}(2 kappa sqrt(1-h^2)): slower particles stop at impact h."""
        y = 2.0 * self.kappa * np.sqrt(1.0 - np.asarray(h, dtype=float) ** 2)
        return self.profile.a_inv(np.minimum(y, self.profile.a_max))

    def k(self, u):
        """Probability that a collision at speed ``u`` stops the particle."""
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise ValueError("k(u) needs u >= 0")
        if self.kappa == 0:
            return np.where(u == 0, 1.0, 0.0)
        x = self.profile.a(u) / (2.0 * self.kappa)
        return np.where(x < 1.0, np.clip(1.0 - x * x, 0.0, 1.0) ** ((self.d - 1) / 2.0), 0.0)

    def exit_cdf(self, r, x):
        """P(exit speed <= x | collision at speed r), for 0 <= x; broadcasts."""
        r = np.asarray(r, dtype=float)
        x = np.asarray(x, dtype=float)
        if self.kappa == 0:
            return np.where(x >= r, 1.0, 0.0)
        gap = (self.profile.a(r) - self.profile.a(np.minimum(x, r))) / (2.0 * self.kappa)
        p = np.where(gap < 1.0, np.clip(1.0 - gap * gap, 0.0, 1.0) ** ((self.d - 1) / 2.0), 0.0)
        return np.where(x >= r, 1.0, p)

    def deficit(self, w):
        """a-deficit of a collision at w = h^{d-1} (uniform on [0, 1])."""
        h = np.asarray(w, dtype=float) ** (1.0 / (self.d - 1))
        return 2.0 * self.kappa * np.sqrt(np.clip(1.0 - h * h, 0.0, None))


def k_of_u(kernel: CollisionKernel, u):
    return kernel.k(u)


def lambda_F(kernel: CollisionKernel, dist: SpeedDistribution) -> float:
    """Stopping rate sigma * sum_i w_i r_i k(r_i) of a (moving) speed law."""
    r = dist.speeds
    return float(kernel.sigma * np.sum(dist.weights * r * kernel.k(r)))


# --------------------------------------------------------------------------
# backward recursion


@dataclass(frozen=True)
class BackwardResult:
    value: float
    remainder: float
    n_max: int


def _phi_values(phi, r):
    out = np.asarray(phi(np.asarray(r, dtype=float)), dtype=float)
    return np.broadcast_to(out, np.shape(r)).astype(float)


def backward_expectation(
    kernel: CollisionKernel,
    phi: Callable[[np.ndarray], np.ndarray],
    r0: float,
    t: float,
    n_max: int,
    n_time: int = 400,
    n_a: int = 400,
) -> BackwardResult:
    """E[phi(speed at time t)] for a particle started at speed ``r0``.

    ``phi`` is evaluated on speeds; ``phi(0)`` is the value for a stopped
    particle. Iterates

        u_0(t, r) = exp(-sigma r t) phi(r)
        u_N(t, r) = exp(-sigma r t) phi(r)
                    + int_0^t sigma r exp(-sigma r s) E_h[u_{N-1}(t - s, r'(h))] ds

    with u(., 0) = phi(0), on a grid uniform in a(r) over (0, a(r0)] and
    in time over [0, t]. The time integral uses an exponential integrator
    with piecewise-linear data; the collision average splits off the stopped
    part k(r) phi(0) and integrates the rest in w = h^{d-1} with a 64-node
    Gauss-Legendre rule. The returned remainder bounds the effect of
    truncating after ``n_max`` collisions: sup|phi| P(Poisson(sigma r0 t) > n_max).
    """
    if r0 < 0 or t < 0 or n_max < 0:
        raise ValueError("backward_expectation needs r0 >= 0, t >= 0, n_max >= 0")
    phi_zero = float(_phi_values(phi, np.array([0.0]))[0])
    sup = float(np.max(np.abs(_phi_values(phi, np.linspace(0.0, max(r0, 1e-300), 2001)))))
    if not math.isfinite(sup):
        raise ValueError("phi must be bounded")
    remainder = sup * float(stats.poisson.sf(n_max, kernel.sigma * r0 * t))
    if r0 == 0:
        return BackwardResult(phi_zero, 0.0, n_max)
    if t == 0 or kernel.sigma == 0:
        val = float(_phi_values(phi, np.array([r0]))[0])
        return BackwardResult(val, 0.0 if t == 0 else remainder, n_max)

    profile = kernel.profile
    A0 = float(profile.a(r0))
    a_nodes = np.linspace(0.0, A0, n_a + 1)
    r_nodes = profile.a_inv(a_nodes)
    r_nodes[-1] = r0
    tiny = np.finfo(float).tiny
    phi_r = _phi_values(phi, r_nodes)
    # A moving particle at vanishing speed keeps phi(0+) forever.
    phi_r[0] = float(_phi_values(phi, np.array([tiny]))[0])
    rate = kernel.sigma * r_nodes
    times = np.linspace(0.0, t, n_time + 1)
    dt = times[1]

    k_nodes = kernel.k(r_nodes)
    P = _collision_average_matrix(kernel, a_nodes, k_nodes)

    decay = np.exp(-np.outer(times, rate))
    free = decay * phi_r
    u = free.copy()
    u[:, 0] = phi_r[0]

    x = rate * dt
    ex = np.exp(-x)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(x > 1e-8, -np.expm1(-x) / x, 1.0 - x / 2.0)
    alpha1 = 1.0 - frac
    alpha0 = frac - ex

    for _ in range(n_max):
        G = u @ P.T + k_nodes * phi_zero
        integ = np.zeros_like(u)
        for j in range(n_time):
            integ[j + 1] = ex * integ[j] + alpha0 * G[j] + alpha1 * G[j + 1]
        u = free + integ
        u[:, 0] = phi_r[0]
    return BackwardResult(float(u[-1, -1]), remainder, n_max)


def _collision_average_matrix(kernel: CollisionKernel, a_nodes: np.ndarray, k_nodes: np.ndarray) -> np.ndarray:
    """Linear map from node values u(A_j) to int_{k(r_m)}^1 u(A_m - D(w)) dw."""
    n = a_nodes.size
    da = a_nodes[1] - a_nodes[0]
    gx, gw = np.polynomial.legendre.leggauss(W_NODES)
    P = np.zeros((n, n))
    for m in range(1, n):
        lo = float(k_nodes[m])
        if lo >= 1.0:
            continue
        w = lo + (1.0 - lo) * 0.5 * (gx + 1.0)
        weight = (1.0 - lo) * 0.5 * gw
        target = np.clip(a_nodes[m] - kernel.deficit(w), 0.0, a_nodes[m])
        pos = target / da
        i = np.minimum(np.floor(pos).astype(int), n - 2)
        theta = pos - i
        np.add.at(P[m], i, weight * (1.0 - theta))
        np.add.at(P[m], i + 1, weight * theta)
    return P


def backward_expectation_direct(
    kernel: CollisionKernel,
    phi: Callable[[np.ndarray], np.ndarray],
    r0: float,
    t: float,
    n_max: int,
    nodes: int = 24,
) -> float:
    """Same truncated expectation by direct nested Gauss-Legendre quadrature.

    Independent cross-check of :func:`backward_expectation` for ``n_max <= 2``.
    The collision average is taken over the angle theta with h = cos(theta),
    which keeps the integrand smooth up to the stopping cut.
    """
    if n_max > 2:
        raise ValueError("direct quadrature is limited to n_max <= 2")
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    profile = kernel.profile
    phi_zero = float(_phi_values(phi, np.array([0.0]))[0])

    def u(level, tau, r):
        # tau, r: arrays of equal shape, r > 0
        base = np.exp(-kernel.sigma * r * tau) * _phi_values(phi, r)
        if level == 0:
            return base
        shape = r.shape
        A = profile.a(r)
        theta_cut = np.arcsin(np.minimum(A / (2.0 * kernel.kappa), 1.0))
        k = kernel.k(r)
        s = (0.5 * (gx + 1.0))[None, :] * tau[..., None]
        ws = (0.5 * gw)[None, :] * tau[..., None]
        # Angle range split where the exit speed crosses a^{-1}(2 kappa): the
        # inner stopping probability has a kink there.
        kink = np.arcsin(np.clip((A - 2.0 * kernel.kappa) / (2.0 * kernel.kappa), 0.0, 1.0))
        kink = np.minimum(kink, theta_cut)
        th, wt = [], []
        for lo, hi in ((np.zeros_like(kink), kink), (kink, theta_cut)):
            th.append(lo[..., None] + (0.5 * (gx + 1.0))[None, :] * (hi - lo)[..., None])
            wt.append((0.5 * gw)[None, :] * (hi - lo)[..., None])
        th, wt = np.concatenate(th, axis=-1), np.concatenate(wt, axis=-1)
        n_th = th.shape[-1]
        dens = (kernel.d - 1) * np.cos(th) ** (kernel.d - 2) * np.sin(th)
        A_out = A[..., None] - 2.0 * kernel.kappa * np.sin(th)
        r_out = profile.a_inv(np.clip(A_out, 0.0, None))
        tau_in = np.broadcast_to((tau[..., None] - s)[..., :, None], shape + (nodes, n_th))
        r_in = np.broadcast_to(r_out[..., None, :], shape + (nodes, n_th))
        safe = np.maximum(r_in, 1e-300)
        inner = u(level - 1, tau_in, safe)
        moving = np.sum(inner * (wt * dens)[..., None, :], axis=-1)
        avg = k[..., None] * phi_zero + moving
        rate = kernel.sigma * r[..., None]
        return base + np.sum(ws * rate * np.exp(-rate * s) * avg, axis=-1)

    return float(u(n_max, np.array([float(t)]), np.array([float(r0)]))[0])


# --------------------------------------------------------------------------
# forward solver


@dataclass
class SpeedGrid:
    """Masses on speed nodes r_i = i * R / M (i = 1..M) plus stopped mass."""

    speeds: np.ndarray
    weights: np.ndarray
    stopped_mass: float = 0.0

    @classmethod
    def nodes(cls, R: float, cells: int) -> np.ndarray:
        return R * np.arange(1, cells + 1) / cells

    @classmethod
    def point_mass(cls, r0: float, R: float, cells: int, mass: float = 1.0) -> "SpeedGrid":
        speeds = cls.nodes(R, cells)
        w = np.zeros(cells)
        w[int(np.argmin(np.abs(speeds - r0)))] = mass
        return cls(speeds, w)

    @classmethod
    def uniform(cls, low: float, high: float, R: float, cells: int, mass: float = 1.0) -> "SpeedGrid":
        """Cell-averaged uniform law on [low, high] (dual cells around nodes)."""
        speeds = cls.nodes(R, cells)
        h = R / cells
        edges_lo = np.concatenate([[0.0], speeds[:-1] + h / 2])
        edges_hi = np.concatenate([speeds[:-1] + h / 2, [R]])
        overlap = np.clip(np.minimum(edges_hi, high) - np.maximum(edges_lo, low), 0.0, None)
        return cls(speeds, mass * overlap / (high - low))

    @property
    def total(self) -> float:
        return float(self.weights.sum() + self.stopped_mass)

    @property
    def moving(self) -> SpeedDistribution:
        return SpeedDistribution(self.speeds, self.weights, provenance="kinetic")

    @property
    def width(self) -> float:
        return float(self.speeds[1] - self.speeds[0]) if self.speeds.size > 1 else float(self.speeds[0])


@dataclass
class ForwardSolution:
    times: np.ndarray
    speeds: np.ndarray
    weights: np.ndarray  # [time, node]
    stopped: np.ndarray  # [time]

    def grid(self, k: int = -1) -> SpeedGrid:
        return SpeedGrid(self.speeds, self.weights[k].copy(), float(self.stopped[k]))

    @property
    def totals(self) -> np.ndarray:
        return self.weights.sum(axis=1) + self.stopped


def transition_matrix(kernel: CollisionKernel, speeds: np.ndarray) -> np.ndarray:
    """Row i: law of the post-collision node for a collision at node i.

    Column 0 is the stopped bucket, column j >= 1 the node j-1. Probabilities
    are exact CDF differences over dual cells (node j-1 collects exit speeds
    in (r_j - h/2, r_j + h/2]; the lowest node collects everything down to
    0+), renormalized to sum to one.
    """
    M = speeds.size
    h = speeds[1] - speeds[0] if M > 1 else speeds[0]
    edges = np.concatenate([[0.0], speeds[:-1] + h / 2, [np.inf]])
    T = np.zeros((M, M + 1))
    for i in range(M):
        r = speeds[i]
        cdf = kernel.exit_cdf(r, np.minimum(edges, r))
        cdf[-1] = 1.0
        T[i, 0] = cdf[0]
        T[i, 1:] = np.diff(cdf)
    T = np.clip(T, 0.0, None)
    T /= T.sum(axis=1, keepdims=True)
    return T


def solve_forward(
    kernel: CollisionKernel,
    grid: SpeedGrid,
    t_final: float,
    dt: float,
    snapshot_every: int = 1,
) -> ForwardSolution:
    """Evolve the speed-grid law to ``t_final`` with classical RK4 steps.

    The generator is the Markov jump operator with loss rate sigma*r_i at
    node i and post-collision law from :func:`transition_matrix`. Its rows
    sum to zero, so moving + stopped mass is conserved to rounding.
    Raises :class:`NumericContractError` unless dt * sigma * r_max < 0.1.
    """
    if t_final < 0:
        raise ValueError("t_final must be >= 0")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    speeds = grid.speeds
    courant = dt * kernel.sigma * float(speeds.max())
    if courant >= 0.1:
        raise NumericContractError(
            f"time step too large: dt*sigma*r_max = {courant:.4g} >= 0.1; use dt < {0.1 / (kernel.sigma * speeds.max()):.4g}"
        )
    steps = int(math.ceil(t_final / dt - 1e-9)) if t_final > 0 else 0
    h = t_final / steps if steps else 0.0
    T = transition_matrix(kernel, speeds)
    rate = kernel.sigma * speeds
    gain = T[:, 1:]
    to_stop = T[:, 0]

    def rhs(m):
        out = rate * m
        return out @ gain - out, float(out @ to_stop)

    m = grid.weights.astype(float).copy()
    s = float(grid.stopped_mass)
    times, ws, ss = [0.0], [m.copy()], [s]
    for n in range(steps):
        k1, q1 = rhs(m)
        k2, q2 = rhs(m + 0.5 * h * k1)
        k3, q3 = rhs(m + 0.5 * h * k2)
        k4, q4 = rhs(m + h * k3)
        m = m + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        s = s + (h / 6.0) * (q1 + 2 * q2 + 2 * q3 + q4)
        if (n + 1) % snapshot_every == 0 or n + 1 == steps:
            times.append((n + 1) * h)
            ws.append(m.copy())
            ss.append(s)
    return ForwardSolution(np.array(times), speeds, np.array(ws), np.array(ss))
