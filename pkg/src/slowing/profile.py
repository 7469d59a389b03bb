"""Slowing profiles S(u) and the integrated reciprocal a(z) = int_0^z du / S(u).

Crossings of obstacles are additive in the a-coordinate, so every engine
works with ``a`` and its inverse; the per-crossing exit-speed map is built
on top of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "ProfileError",
    "SlowingProfile",
    "constant_profile",
    "affine_profile",
    "tabulated_profile",
    "evaluate_a",
    "invert_a",
    "exit_speed",
]

INVERSION_RTOL = 1e-10
MIN_TABLE_NODES = 4096

# 16-point Gauss-Legendre rule on [0, 1], used for all table construction.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


class ProfileError(ValueError):
    """Domain or range violation when evaluating a slowing profile."""


@dataclass(frozen=True)
class SlowingProfile:
    """Speed-dependent friction factor S(u) >= s_floor > 0.

    Use :func:`constant_profile`, :func:`affine_profile` or
    :func:`tabulated_profile` rather than calling the constructor directly.
    Instances are immutable and safe to share between threads.

    Attributes
    ----------
    kind : {"constant", "affine", "tabulated"}
    params : tuple of float
        ``(s0,)`` for constant, ``(s0, slope)`` for affine. Empty for
        tabulated profiles.
    s_floor : float
        Lower bound S0 of the profile over its valid speed range.
    v_max : float
        Largest admissible speed (``inf`` when the closed form is global).
    """

    kind: str
    params: tuple[float, ...]
    s_floor: float
    v_max: float = math.inf
    _nodes: np.ndarray | None = field(default=None, repr=False, compare=False)
    _s_interp: PchipInterpolator | None = field(default=None, repr=False, compare=False)
    _a_table: np.ndarray | None = field(default=None, repr=False, compare=False)
    _r_table: np.ndarray | None = field(default=None, repr=False, compare=False)
    _a_inv_guess: PchipInterpolator | None = field(default=None, repr=False, compare=False)

    # -- S ------------------------------------------------------------------
    def S(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "constant":
            return np.full_like(u, self.params[0])
        if self.kind == "affine":
            s0, slope = self.params
            return s0 + slope * u
        return self._s_interp(u)

    @property
    def a_max(self) -> float:
        """a(v_max); ``inf`` for profiles without a speed cap."""
        if math.isinf(self.v_max):
            return math.inf
        return float(self.a(self.v_max))

    # -- a ------------------------------------------------------------------
    def a(self, z):
        """Return a(z) = int_0^z du / S(u)."""
        z = np.asarray(z, dtype=float)
        if np.any(z < 0):
            raise ProfileError("a(z) requires z >= 0")
        if np.any(z > self.v_max * (1 + 1e-12)):
            raise ProfileError(f"speed above profile range v_max={self.v_max}")
        if self.kind == "constant":
            return z / self.params[0]
        if self.kind == "affine":
            s0, slope = self.params
            if slope == 0.0:
                return z / s0
            return np.log1p(slope * z / s0) / slope
        return self._table_integral(z, self._a_table, lambda u: 1.0 / self._s_interp(u))

    def a_inv(self, y):
        """Return the unique z >= 0 with a(z) = y."""
        y = np.asarray(y, dtype=float)
        if np.any(y < 0):
            raise ProfileError("a^{-1}(y) requires y >= 0")
        if np.any(y > self.a_max * (1 + 1e-12)):
            raise ProfileError(f"a-value above a(v_max)={self.a_max}")
        if self.kind == "constant":
            return y * self.params[0]
        if self.kind == "affine":
            s0, slope = self.params
            if slope == 0.0:
                return y * s0
            return s0 * np.expm1(slope * y) / slope
        return self._tabulated_inverse(y)

    # -- time spent inside obstacles ---------------------------------------
    def log_time(self, v_hi, v_lo):
        """Return int_{v_lo}^{v_hi} du / (u S(u)) for 0 < v_lo <= v_hi.

        Multiplied by eps/kappa this is the time needed to slow from
        ``v_hi`` to ``v_lo`` inside an obstacle.
        """
        v_hi = np.asarray(v_hi, dtype=float)
        v_lo = np.asarray(v_lo, dtype=float)
        if self.kind == "constant":
            return np.log(v_hi / v_lo) / self.params[0]
        if self.kind == "affine":
            s0, slope = self.params
            return (np.log(v_hi / v_lo) - np.log((s0 + slope * v_hi) / (s0 + slope * v_lo))) / s0
        return self._log_primitive(v_hi) - self._log_primitive(v_lo)

    def speed_after_log_time(self, v, tau):
        """Inverse of :meth:`log_time` in its lower argument.

        Returns w <= v such that ``log_time(v, w) == tau``.
        """
        v = np.asarray(v, dtype=float)
        tau = np.asarray(tau, dtype=float)
        if self.kind == "constant":
            return v * np.exp(-self.params[0] * tau)
        # Newton in y = ln w; d/dy log_time(v, e^y) = -1/S(e^y), S in [s_floor, ...].
        v_b, tau_b = np.broadcast_arrays(v, tau)
        y_top = np.log(v_b)
        y = y_top - self.S(v_b) * tau_b
        hi = y_top - self.s_floor * tau_b  # since S >= s_floor
        lo = np.full_like(y, -np.inf)
        for _ in range(100):
            w = np.exp(y)
            f = self.log_time(v_b, w) - tau_b
            hi = np.where(f < 0, np.minimum(hi, y), hi)
            lo = np.where(f > 0, np.maximum(lo, y), lo)
            step = f * self.S(w)
            y_new = y + step
            bad = (y_new >= hi) | (y_new <= lo)
            mid = np.where(np.isfinite(lo), 0.5 * (lo + hi), hi - 1.0 - np.abs(step))
            y_new = np.where(bad, mid, y_new)
            if np.all(np.abs(y_new - y) <= 1e-14 * np.maximum(1.0, np.abs(y))):
                y = y_new
                break
            y = y_new
        return np.exp(y)

    # -- tabulated internals ---------------------------------------------
    def _table_integral(self, z, table, integrand):
        nodes = self._nodes
        idx = np.clip(np.searchsorted(nodes, z, side="right") - 1, 0, len(nodes) - 2)
        left = nodes[idx]
        width = z - left
        pts = left[..., None] + width[..., None] * _GL_X
        partial = width * np.sum(integrand(pts) * _GL_W, axis=-1)
        return table[idx] + partial

    def _log_primitive(self, u):
        # ln(u)/S(0) plus the bounded remainder int_0^u (S(0)-S(w))/(w S(w) S(0)) dw
        s_zero = float(self._s_interp(0.0))
        u = np.asarray(u, dtype=float)
        rem = self._table_integral(u, self._r_table, lambda w: _log_remainder(self._s_interp, s_zero, w))
        return np.log(u) / s_zero + rem

    def _tabulated_inverse(self, y):
        z = np.clip(self._a_inv_guess(y), 0.0, self.v_max)
        for _ in range(8):
            f = self.a(z) - y
            z_new = np.clip(z - f * self.S(z), 0.0, self.v_max)
            if np.all(np.abs(z_new - z) <= 1e-15 * np.maximum(1.0, z)):
                return z_new
            z = z_new
        return z


def _log_remainder(s_interp, s_zero, w):
    s = s_interp(w)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (s_zero - s) / (w * s * s_zero)
    return np.where(w > 0, out, 0.0)


def constant_profile(s0: float = 1.0) -> SlowingProfile:
    if not s0 > 0:
        raise ProfileError("constant profile needs s0 > 0")
    return SlowingProfile("constant", (float(s0),), float(s0))


def affine_profile(s0: float, slope: float, v_max: float = math.inf) -> SlowingProfile:
    """S(u) = s0 + slope * u. A negative slope needs a finite ``v_max``."""
    if not s0 > 0:
        raise ProfileError("affine profile needs s0 > 0")
    if slope < 0:
        if math.isinf(v_max):
            raise ProfileError("decreasing affine profile needs a finite v_max")
        floor = s0 + slope * v_max
        if floor <= 0:
            raise ProfileError("affine profile must stay positive on [0, v_max]")
    else:
        floor = s0
    return SlowingProfile("affine", (float(s0), float(slope)), float(floor), float(v_max))


def tabulated_profile(
    speeds: Sequence[float],
    values: Sequence[float],
    min_nodes: int = MIN_TABLE_NODES,
) -> SlowingProfile:
    """Profile interpolated through ``(speeds, values)`` by monotone cubics.

    The speed range is ``[0, speeds[-1]]``; ``speeds[0]`` must be 0. The
    cumulative a-table is built on at least ``min_nodes`` nodes, each table
    cell lying inside a single interpolation piece.
    """
    speeds = np.asarray(speeds, dtype=float)
    values = np.asarray(values, dtype=float)
    if speeds.ndim != 1 or speeds.shape != values.shape or len(speeds) < 2:
        raise ProfileError("tabulated profile needs matching 1-D speeds/values, length >= 2")
    if speeds[0] != 0.0 or np.any(np.diff(speeds) <= 0):
        raise ProfileError("tabulated speeds must start at 0 and be strictly increasing")
    if np.any(values <= 0):
        raise ProfileError("tabulated profile values must be positive")
    s_interp = PchipInterpolator(speeds, values, extrapolate=False)
    # PCHIP is monotone on each piece, so S never leaves the node value range.
    s_floor = float(values.min())

    per_piece = max(1, math.ceil(min_nodes / (len(speeds) - 1)))
    frac = np.arange(per_piece) / per_piece
    nodes = (speeds[:-1, None] + np.diff(speeds)[:, None] * frac).ravel()
    nodes = np.append(nodes, speeds[-1])

    left = nodes[:-1, None]
    width = np.diff(nodes)[:, None]
    pts = left + width * _GL_X
    cells = width[:, 0] * np.sum(_GL_W / s_interp(pts), axis=1)
    a_table = np.concatenate([[0.0], np.cumsum(cells)])
    s_zero = values[0]
    rem_cells = width[:, 0] * np.sum(_GL_W * _log_remainder(s_interp, s_zero, pts), axis=1)
    r_table = np.concatenate([[0.0], np.cumsum(rem_cells)])
    guess = PchipInterpolator(a_table, nodes, extrapolate=True)
    return SlowingProfile(
        "tabulated",
        (),
        s_floor,
        float(speeds[-1]),
        _nodes=nodes,
        _s_interp=s_interp,
        _a_table=a_table,
        _r_table=r_table,
        _a_inv_guess=guess,
    )


def evaluate_a(profile: SlowingProfile, z):
    return profile.a(z)


def invert_a(profile: SlowingProfile, y):
    return profile.a_inv(y)


def exit_speed(profile: SlowingProfile, v_in, kappa, h):
    """Speed after fully crossing one obstacle at impact parameter ``h``.

    Solves a(v_out) = a(v_in) - 2 kappa sqrt(1 - h^2); the particle stops
    (returns 0) when the a-deficit reaches a(v_in).
    """
    v_in = np.asarray(v_in, dtype=float)
    h = np.asarray(h, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if np.any((h < 0) | (h > 1)):
        raise ProfileError("impact parameter must lie in [0, 1]")
    if np.any(v_in < 0):
        raise ProfileError("v_in must be >= 0")
    deficit = 2.0 * kappa * np.sqrt(1.0 - h * h)
    remaining = profile.a(v_in) - deficit
    moving = remaining > 0
    out = np.zeros(np.broadcast(v_in, remaining).shape)
    if np.any(moving):
        out[moving] = profile.a_inv(np.broadcast_to(remaining, out.shape)[moving])
    # No deficit means no slowdown; avoid a round-trip through a and a^{-1}.
    out = np.where(deficit == 0, np.broadcast_to(v_in, out.shape), out)
    out = np.minimum(out, v_in)
    if out.ndim == 0:
        return float(out)
    return out
