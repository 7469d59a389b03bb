"""The limit velocity-jump process with absorption at zero speed.

A particle flies straight at constant speed r and collides at rate sigma*r.
At a collision the impact parameter h has law h^{d-1} on [0, 1] and the
speed drops to exit_speed(r, kappa, h); a zero exit speed absorbs the
particle in the stopped mass, where it stays forever.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .ensemble import EnsembleResult, InitialLaw, merge_blocks, run_blocks, sample_directions
from .micro import ModelParams, _snapshot_grid
from .profile import SlowingProfile, exit_speed

__all__ = ["JumpState", "sample_impact", "collide", "meso_step", "run_meso_ensemble"]


@dataclass(frozen=True)
class JumpState:
    position: np.ndarray
    direction: np.ndarray
    speed: float
    stopped: bool = False
    jump_count: int = 0

    @classmethod
    def start(cls, speed: float, direction: Sequence[float]) -> "JumpState":
        direction = np.asarray(direction, dtype=float)
        return cls(np.zeros_like(direction), direction / np.linalg.norm(direction), float(speed))


def sample_impact(rng: np.random.Generator, d: int, size=None):
    """Impact parameters with CDF h^{d-1}, by inversion."""
    return rng.random(size) ** (1.0 / (d - 1))


def collide(rng: np.random.Generator, profile: SlowingProfile, params: ModelParams, speeds):
    """Post-collision speeds for an array of pre-collision speeds (0 = stopped)."""
    h = sample_impact(rng, params.d, np.shape(speeds))
    return exit_speed(profile, speeds, params.kappa, h)


def meso_step(
    rng: np.random.Generator,
    profile: SlowingProfile,
    params: ModelParams,
    state: JumpState,
    t_remaining: float,
) -> tuple[JumpState, float]:
    """Advance to the next collision or to the horizon, whichever comes first."""
    if state.stopped:
        raise RuntimeError("meso_step called on a stopped particle")
    if not t_remaining > 0:
        raise ValueError("t_remaining must be > 0")
    rate = params.sigma * state.speed
    wait = rng.exponential(1.0 / rate) if rate > 0 else np.inf
    if wait >= t_remaining:
        pos = state.position + state.speed * t_remaining * state.direction
        return replace(state, position=pos), t_remaining
    pos = state.position + state.speed * wait * state.direction
    new_speed = float(collide(rng, profile, params, state.speed))
    return (
        replace(state, position=pos, speed=new_speed, stopped=new_speed == 0.0, jump_count=state.jump_count + 1),
        float(wait),
    )


def _meso_block(rng, sl, profile, params, law, times, full_positions):
    n = sl.stop - sl.start
    v0 = law.sample(rng, n)
    directions = sample_directions(rng, n, params.d) if full_positions else None
    t_final = float(times[-1])
    K = len(times)
    out_speed = np.empty((K, n))
    out_arc = np.empty((K, n))
    out_stopped = np.zeros((K, n), dtype=bool)

    t = np.zeros(n)
    arc = np.zeros(n)
    v = v0.copy()
    jumps = np.zeros(n, dtype=np.int64)
    for k, ts in enumerate(times):
        if ts == 0.0:
            out_speed[k], out_arc[k] = v0, 0.0
    active = np.arange(n) if t_final > 0 else np.arange(0)
    sigma = params.sigma
    while active.size:
        va = v[active]
        ta = t[active]
        with np.errstate(divide="ignore"):
            wait = rng.exponential(size=active.size) / (sigma * va)
        t_next = ta + wait
        for k, ts in enumerate(times):
            hit = (ta < ts) & (ts <= t_next)
            if hit.any():
                idx = active[hit]
                out_speed[k, idx] = va[hit]
                out_arc[k, idx] = arc[idx] + va[hit] * (ts - ta[hit])
        jumping = t_next < t_final
        idx = active[jumping]
        if idx.size == 0:
            break
        arc[idx] += va[jumping] * wait[jumping]
        t[idx] = t_next[jumping]
        new_v = np.atleast_1d(collide(rng, profile, params, va[jumping]))
        v[idx] = new_v
        jumps[idx] += 1
        dead = new_v == 0.0
        if dead.any():
            gone = idx[dead]
            for k, ts in enumerate(times):
                late = t[gone] < ts
                out_speed[k, gone[late]] = 0.0
                out_arc[k, gone[late]] = arc[gone[late]]
                out_stopped[k, gone[late]] = True
        active = idx[~dead]
    out = {"speed": out_speed, "arc": out_arc, "stopped": out_stopped, "v0": v0, "directions": directions}
    out["extras"] = {"jumps": jumps}
    return out


def run_meso_ensemble(
    profile: SlowingProfile,
    params: ModelParams,
    initial_law: InitialLaw,
    t_final: float,
    replicas: int,
    master_seed: int,
    snapshot_times: Sequence[float] | None = None,
    threads: int = 1,
    full_positions: bool = False,
) -> EnsembleResult:
    """Simulate ``replicas`` independent jump-process particles.

    Each particle carries unit mass; at every snapshot it is either moving or
    counted in the stopped mass, so mass is conserved exactly per replica.
    """
    times = _snapshot_grid(snapshot_times, t_final)
    work = lambda rng, sl: _meso_block(rng, sl, profile, params, initial_law, times, full_positions)  # noqa: E731
    parts = run_blocks(work, replicas, master_seed, threads)
    return merge_blocks("meso", times, parts, master_seed)
