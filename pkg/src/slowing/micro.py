"""Exact simulation of a particle slowing inside Poisson-distributed balls.

Inside an obstacle the velocity obeys dV/dt = -(kappa/eps) S(|V|) V, so the
direction never changes and the motion is one-dimensional along the ray.
Per unit arc length a(|V|) drops by kappa/eps while covered, giving

    a(|V(s)|) = a(v0) - (kappa/eps) * m(s),

with m(s) the covered length of [0, s]. Only obstacles whose centres lie in
the eps-tube around the ray matter; they form a Poisson process of rate
sigma = lambda * B^{d-1} in arc length with impact parameters of law h^{d-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .analysis import binomial_ci
from .ensemble import EnsembleResult, InitialLaw, merge_blocks, run_blocks, sample_directions
from .profile import SlowingProfile

__all__ = [
    "unit_ball_volume",
    "ModelParams",
    "Crossing",
    "TubeRealization",
    "sample_tube",
    "CoverageFunction",
    "union_coverage",
    "TrajectoryEvent",
    "TrajectoryLog",
    "advance_micro",
    "jacobian_factor",
    "run_micro_ensemble",
    "OverlapEstimate",
    "overlap_statistics",
]

DEFAULT_STOP_FRACTION = 1e-6
STOP_RULES = ("absorbed", "threshold")


def unit_ball_volume(d: int) -> float:
    """Lebesgue measure B^d of the unit ball in R^d (B^1 = 2, B^2 = pi)."""
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


@dataclass(frozen=True)
class ModelParams:
    d: int
    epsilon: float
    kappa: float
    lambda_intensity: float

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("dimension d must be >= 2")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.lambda_intensity < 0:
            raise ValueError("lambda_intensity must be >= 0")

    @property
    def ball_volume(self) -> float:
        return unit_ball_volume(self.d)

    @property
    def cross_section(self) -> float:
        return unit_ball_volume(self.d - 1)

    @property
    def sigma(self) -> float:
        """Collision rate per unit path length, lambda * B^{d-1}."""
        return self.lambda_intensity * self.cross_section

    @property
    def lambda_eps(self) -> float:
        """Obstacle centres per unit volume, lambda / eps^{d-1}."""
        return self.lambda_intensity / self.epsilon ** (self.d - 1)

    def with_epsilon(self, epsilon: float) -> "ModelParams":
        return ModelParams(self.d, epsilon, self.kappa, self.lambda_intensity)


@dataclass(frozen=True)
class Crossing:
    arc_position: float
    impact: float
    chord_half: float


@dataclass
class TubeRealization:
    """Obstacles met by the ray ``x + s * direction``, ``0 <= s <= length``.

    ``transverse`` holds each centre's offset from the ray in units of eps,
    as a vector in the (d-1)-dimensional orthogonal complement; its norm is
    the impact parameter. Centre j sits at
    ``x + arc[j] * direction + eps * transverse[j]`` (in the rotated frame).
    """

    length: float
    epsilon: float
    arc: np.ndarray
    impact: np.ndarray
    transverse: np.ndarray | None = None
    origin: np.ndarray | None = None
    direction: np.ndarray | None = None
    seed: dict = field(default_factory=dict)

    @property
    def chord_half(self) -> np.ndarray:
        return self.epsilon * np.sqrt(1.0 - self.impact**2)

    @property
    def crossings(self) -> list[Crossing]:
        return [Crossing(float(p), float(h), float(c)) for p, h, c in zip(self.arc, self.impact, self.chord_half)]

    def __len__(self) -> int:
        return self.arc.shape[0]


def _draw_tube(rng, params: ModelParams, length: float, count: int, with_transverse: bool):
    eps = params.epsilon
    arc = np.sort(rng.uniform(-eps, length + eps, size=count))
    if with_transverse:
        m = params.d - 1
        g = rng.standard_normal((count, m))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        radius = rng.random(count) ** (1.0 / m)
        transverse = g * radius[:, None]
        impact = np.minimum(radius, 1.0)
        return arc, impact, transverse
    impact = rng.random(count) ** (1.0 / (params.d - 1))
    return arc, impact, None


def sample_tube(
    rng: np.random.Generator,
    params: ModelParams,
    length: float,
    with_transverse: bool = False,
) -> TubeRealization:
    """Sample the Poisson obstacles whose eps-ball can touch the ray segment.

    Centres projected on the ray form a rate-sigma Poisson process on
    ``[-eps, length + eps]``; impact parameters are ``U**(1/(d-1))``.
    """
    if not length > 0:
        raise ValueError("tube length must be > 0")
    mean = params.sigma * (length + 2 * params.epsilon)
    count = int(rng.poisson(mean))
    arc, impact, transverse = _draw_tube(rng, params, length, count, with_transverse)
    return TubeRealization(length, params.epsilon, arc, impact, transverse)


@dataclass(frozen=True)
class CoverageFunction:
    """m(s): covered length of [0, s] by a union of disjoint sorted intervals."""

    starts: np.ndarray
    ends: np.ndarray

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.starts.size == 0:
            return np.zeros_like(s)
        lengths = self.ends - self.starts
        before = np.concatenate([[0.0], np.cumsum(lengths)])
        k = np.searchsorted(self.starts, s, side="right")
        j = np.maximum(k - 1, 0)
        inside = np.clip(s - self.starts[j], 0.0, lengths[j])
        return np.where(k > 0, before[j] + inside, 0.0)

    @property
    def intervals(self) -> list[tuple[float, float]]:
        return list(zip(self.starts.tolist(), self.ends.tolist()))


def _merge(starts: Sequence[float], ends: Sequence[float]) -> tuple[list[float], list[float]]:
    out_s: list[float] = []
    out_e: list[float] = []
    for a, b in sorted(zip(starts, ends)):
        if b <= a:
            continue
        if out_e and a <= out_e[-1]:
            if b > out_e[-1]:
                out_e[-1] = b
        else:
            out_s.append(a)
            out_e.append(b)
    return out_s, out_e


def union_coverage(crossings, epsilon: float | None = None, length: float | None = None) -> CoverageFunction:
    """Union of obstacle chords along the ray, clipped to ``[0, length]``.

    ``crossings`` is a :class:`TubeRealization` or a sequence of
    :class:`Crossing`. Overlapping chords are merged, never double counted.
    """
    if isinstance(crossings, TubeRealization):
        p = crossings.arc
        c = crossings.chord_half
        if length is None:
            length = crossings.length
    else:
        p = np.array([x.arc_position for x in crossings], dtype=float)
        if epsilon is not None:
            c = np.array([epsilon * math.sqrt(1.0 - x.impact**2) for x in crossings], dtype=float)
        else:
            c = np.array([x.chord_half for x in crossings], dtype=float)
    lo = np.maximum(p - c, 0.0)
    hi = p + c if length is None else np.minimum(p + c, length)
    s, e = _merge(lo.tolist(), hi.tolist())
    return CoverageFunction(np.array(s), np.array(e))


# --------------------------------------------------------------------------
# single trajectory


@dataclass(frozen=True)
class TrajectoryEvent:
    time: float
    arc: float
    speed: float
    kind: str  # "entry" | "exit" | "stop-threshold" | "final"


@dataclass
class TrajectoryLog:
    """Event history of one particle. The direction never changes."""

    v0: float
    events: list[TrajectoryEvent]
    stopped: bool
    profile: SlowingProfile = field(repr=False)
    params: ModelParams = field(repr=False)
    origin: np.ndarray | None = None
    direction: np.ndarray | None = None

    @property
    def final(self) -> TrajectoryEvent:
        return self.events[-1]

    def state_at(self, t: float) -> tuple[float, float, bool]:
        """(arc length, speed, stopped) at time ``t`` within the logged span."""
        if t < 0 or (not self.stopped and t > self.final.time * (1 + 1e-12)):
            raise ValueError("time outside logged trajectory")
        arc, speed, inside = 0.0, self.v0, False
        t0 = 0.0
        for ev in self.events:
            if ev.time > t:
                break
            if ev.kind == "stop-threshold":
                return ev.arc, 0.0, True
            arc, speed, t0 = ev.arc, ev.speed, ev.time
            inside = ev.kind == "entry"
        dt = t - t0
        if dt <= 0:
            return arc, speed, False
        if not inside:
            return arc + speed * dt, speed, False
        ratio = self.params.epsilon / self.params.kappa
        v = float(self.profile.speed_after_log_time(speed, dt / ratio))
        da = float(self.profile.a(speed) - self.profile.a(v))
        return arc + ratio * da, v, False

    def position_at(self, t: float) -> np.ndarray:
        if self.direction is None:
            raise ValueError("log has no direction attached")
        origin = np.zeros_like(self.direction) if self.origin is None else self.origin
        return origin + self.state_at(t)[0] * self.direction


def advance_micro(
    profile: SlowingProfile,
    params: ModelParams,
    tube: TubeRealization,
    v0: float,
    t_final: float,
    stop_threshold: float | None = None,
    stop_rule: str = "absorbed",
) -> TrajectoryLog:
    """Integrate one particle through a sampled tube up to ``t_final``.

    Free flight between obstacles is uniform; inside the covered set the
    speed follows a(|V|) linearly in arc length and time is recovered from
    the closed/tabulated integral of du / (u S(u)).

    A particle whose a-budget runs below a(stop_threshold) inside a covered
    interval is stopped. With ``stop_rule="threshold"`` the flag is raised
    when the speed actually reaches the threshold, which takes a time of
    order (eps/kappa) * ln(v / stop_threshold). With ``"absorbed"`` it is
    raised at entry into that interval, where the particle is frozen.
    """
    if not t_final > 0:
        raise ValueError("t_final must be > 0")
    if not v0 > 0:
        raise ValueError("v0 must be > 0")
    if tube.length < v0 * t_final * (1 - 1e-12):
        raise ValueError("tube shorter than the maximal travel distance v0 * t_final")
    if stop_threshold is None:
        stop_threshold = DEFAULT_STOP_FRACTION * v0
    if not 0 < stop_threshold < v0:
        raise ValueError("stop_threshold must lie in (0, v0)")
    if stop_rule not in STOP_RULES:
        raise ValueError(f"stop_rule must be one of {STOP_RULES}")

    cover = union_coverage(tube)
    eps, kappa = params.epsilon, params.kappa
    ratio = eps / kappa if kappa > 0 else math.inf
    a_fn, a_inv, log_time = profile.a, profile.a_inv, profile.log_time
    a_stop = float(a_fn(stop_threshold))

    events: list[TrajectoryEvent] = []
    t, s, v = 0.0, 0.0, float(v0)
    a_v = float(a_fn(v))
    stopped = False
    for b, e in zip(cover.starts.tolist(), cover.ends.tolist()):
        if b > s:
            dt = (b - s) / v
            if t + dt >= t_final:
                break
            t += dt
            s = b
        if kappa == 0:
            continue
        a_end = a_v - (e - s) / ratio
        if a_end <= a_stop and stop_rule == "absorbed":
            events.append(TrajectoryEvent(t, s, v, "stop-threshold"))
            stopped = True
            break
        events.append(TrajectoryEvent(t, s, v, "entry"))
        if a_end <= a_stop:
            v_end, s_end, kind = stop_threshold, s + (a_v - a_stop) * ratio, "stop-threshold"
        else:
            v_end, s_end, kind = float(a_inv(a_end)), e, "exit"
        dt = ratio * float(log_time(v, v_end))
        if t + dt >= t_final:
            v_f = float(profile.speed_after_log_time(v, (t_final - t) / ratio))
            s_f = s + (a_v - float(a_fn(v_f))) * ratio
            events.append(TrajectoryEvent(t_final, s_f, v_f, "final"))
            return TrajectoryLog(v0, events, False, profile, params, tube.origin, tube.direction)
        t += dt
        s = s_end
        v = v_end
        a_v = float(a_fn(v)) if kind == "exit" else a_stop
        if kind == "stop-threshold":
            events.append(TrajectoryEvent(t, s, v, kind))
            stopped = True
            break
        events.append(TrajectoryEvent(t, s, v, "exit"))
    if not stopped:
        s += v * (t_final - t)
        events.append(TrajectoryEvent(t_final, s, v, "final"))
    return TrajectoryLog(v0, events, stopped, profile, params, tube.origin, tube.direction)


def jacobian_factor(profile: SlowingProfile, v_initial: float, v_final: float, d: int) -> float:
    """Phase-volume factor (v_final / v_initial)^d * S(v_final) / S(v_initial)."""
    if not (v_initial > 0 and v_final > 0):
        raise ValueError("jacobian_factor needs positive speeds")
    return float((v_final / v_initial) ** d * profile.S(v_final) / profile.S(v_initial))


# --------------------------------------------------------------------------
# ensembles


def _micro_block(rng, sl, profile, params, law, times, stop_fraction, stop_rule, full_positions, keep_logs):
    n = sl.stop - sl.start
    v0 = law.sample(rng, n)
    directions = sample_directions(rng, n, params.d) if full_positions else None
    t_final = float(times[-1])
    lengths = v0 * t_final
    counts = rng.poisson(params.sigma * (lengths + 2 * params.epsilon))
    K = len(times)
    speed = np.empty((K, n))
    arc = np.empty((K, n))
    stopped = np.zeros((K, n), dtype=bool)
    logs = []
    threshold = stop_fraction * law.bound
    for i in range(n):
        L = float(lengths[i])
        p, h, _ = _draw_tube(rng, params, L, int(counts[i]), False)
        tube = TubeRealization(L, params.epsilon, p, h, direction=None if directions is None else directions[i])
        if t_final > 0:
            log = advance_micro(profile, params, tube, float(v0[i]), t_final, min(threshold, 0.5 * v0[i]), stop_rule)
        else:
            log = TrajectoryLog(float(v0[i]), [TrajectoryEvent(0.0, 0.0, float(v0[i]), "final")], False, profile, params)
        for k, ts in enumerate(times):
            arc[k, i], speed[k, i], stopped[k, i] = log.state_at(float(ts))
        if keep_logs:
            logs.append(log)
    out = {"speed": speed, "arc": arc, "stopped": stopped, "v0": v0, "directions": directions}
    out["extras"] = {"logs": logs} if keep_logs else {}
    return out


def run_micro_ensemble(
    profile: SlowingProfile,
    params: ModelParams,
    initial_law: InitialLaw,
    t_final: float,
    replicas: int,
    master_seed: int,
    snapshot_times: Sequence[float] | None = None,
    stop_fraction: float = DEFAULT_STOP_FRACTION,
    stop_rule: str = "absorbed",
    threads: int = 1,
    full_positions: bool = False,
    keep_logs: bool = False,
) -> EnsembleResult:
    """Monte Carlo estimate of the expected finite-eps state over configurations.

    Every replica draws its own initial speed and obstacle tube. Particles
    are declared stopped below ``stop_fraction * R`` according to
    ``stop_rule`` (see :func:`advance_micro`). Output is identical for any
    ``threads`` value.
    """
    times = _snapshot_grid(snapshot_times, t_final)
    work = lambda rng, sl: _micro_block(  # noqa: E731
        rng, sl, profile, params, initial_law, times, stop_fraction, stop_rule, full_positions, keep_logs
    )
    parts = run_blocks(work, replicas, master_seed, threads)
    return merge_blocks("micro", times, parts, master_seed)


def _snapshot_grid(snapshot_times, t_final) -> np.ndarray:
    if t_final < 0:
        raise ValueError("t_final must be >= 0")
    extra = [] if snapshot_times is None else [float(t) for t in snapshot_times]
    times = sorted(set(extra + [float(t_final)]))
    if times[0] < 0 or times[-1] > t_final:
        raise ValueError("snapshot times must lie in [0, t_final]")
    return np.array(times)


@dataclass(frozen=True)
class OverlapEstimate:
    fraction: float
    ci_low: float
    ci_high: float
    hits: int
    tubes: int
    analytic_bound: float

    @property
    def stderr(self) -> float:
        return math.sqrt(max(self.fraction * (1 - self.fraction), 1e-300) / self.tubes)


def crossed_overlap(arc: np.ndarray, transverse: np.ndarray, epsilon: float, length: float) -> bool:
    """True if two obstacles whose balls meet the segment [0, length] intersect."""
    if arc.size < 2:
        return False
    impact = np.linalg.norm(transverse, axis=1)
    half = epsilon * np.sqrt(np.clip(1.0 - impact**2, 0.0, None))
    hit = (arc + half >= 0) & (arc - half <= length)
    p = arc[hit]
    q = transverse[hit] * epsilon
    if p.size < 2:
        return False
    # p is sorted: only neighbours within 2 eps along the ray can intersect.
    for i in range(p.size - 1):
        j = i + 1
        while j < p.size and p[j] - p[i] < 2 * epsilon:
            if (p[j] - p[i]) ** 2 + float(np.sum((q[j] - q[i]) ** 2)) < 4 * epsilon**2:
                return True
            j += 1
    return False


def overlap_statistics(
    params: ModelParams,
    length: float,
    tubes: int,
    master_seed: int,
    level: float = 0.95,
) -> OverlapEstimate:
    """Fraction of tubes in which two crossed obstacles superimpose.

    Centres are fully reconstructed (arc position plus transverse offset) and
    every crossed pair is tested for ball intersection.
    """
    if params.lambda_intensity == 0:
        return OverlapEstimate(0.0, 0.0, 0.0, 0, tubes, 0.0)

    def work(rng, sl):
        hits = 0
        for _ in range(sl.stop - sl.start):
            tube = sample_tube(rng, params, length, with_transverse=True)
            hits += crossed_overlap(tube.arc, tube.transverse, params.epsilon, length)
        return {"hits": hits}

    hits = sum(part["hits"] for part in run_blocks(work, tubes, master_seed))
    lo, hi = binomial_ci(hits, tubes, level)
    bound = params.lambda_intensity * params.epsilon * 2**params.d * params.ball_volume
    return OverlapEstimate(hits / tubes, lo, hi, hits, tubes, bound)
