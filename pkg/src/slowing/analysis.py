"""Comparison metrics and run-time invariant checks shared by all engines."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

__all__ = [
    "SpeedDistribution",
    "wasserstein1",
    "w1_stderr",
    "binomial_ci",
    "CheckResult",
    "InvariantReport",
    "check_invariants",
]


@dataclass
class SpeedDistribution:
    """Weighted speed sample of the moving part of an ensemble.

    Zero-speed (stopped) mass is never stored here; engines report it as a
    separate scalar.
    """

    speeds: np.ndarray
    weights: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=float)
        if self.weights is None:
            self.weights = np.ones_like(self.speeds)
        else:
            self.weights = np.asarray(self.weights, dtype=float)
        if self.speeds.shape != self.weights.shape:
            raise ValueError("speeds and weights must have the same shape")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(self.speeds < 0):
            raise ValueError("speeds must be nonnegative")

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def effective_size(self) -> float:
        w2 = float(np.sum(self.weights**2))
        return self.mass**2 / w2 if w2 > 0 else 0.0

    def mean(self, fn=lambda r: r) -> float:
        return float(np.sum(self.weights * fn(self.speeds)) / self.mass)

    def _sorted_cdf(self):
        order = np.argsort(self.speeds, kind="stable")
        x = self.speeds[order]
        c = np.cumsum(self.weights[order]) / self.mass
        return x, c


def _cdf_at(x_sorted, c_sorted, pts):
    idx = np.searchsorted(x_sorted, pts, side="right") - 1
    return np.where(idx >= 0, c_sorted[np.clip(idx, 0, None)], 0.0)


def wasserstein1(p: SpeedDistribution, q: SpeedDistribution) -> float:
    """Exact 1-D W1 distance between the normalized laws of ``p`` and ``q``."""
    if p.mass <= 0 or q.mass <= 0:
        raise ValueError("wasserstein1 needs distributions with positive mass")
    xp, cp = p._sorted_cdf()
    xq, cq = q._sorted_cdf()
    grid = np.unique(np.concatenate([xp, xq]))
    if grid.size < 2:
        return 0.0
    gap = np.abs(_cdf_at(xp, cp, grid[:-1]) - _cdf_at(xq, cq, grid[:-1]))
    return float(np.sum(gap * np.diff(grid)))


def w1_stderr(p: SpeedDistribution) -> float:
    """Sampling scale of W1 between ``p`` and the law it was drawn from.

    Uses E|F_n(x) - F(x)| ~ sqrt(2 F (1 - F) / (pi n)) integrated over x,
    with the Kish effective size for weighted samples.
    """
    n = p.effective_size
    if n <= 0:
        raise ValueError("empty distribution")
    x, c = p._sorted_cdf()
    if x.size < 2:
        return 0.0
    f = c[:-1]
    return float(np.sum(np.sqrt(2.0 * f * (1.0 - f) / (math.pi * n)) * np.diff(x)))


def binomial_ci(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(confidence_level=level, method="wilson")
    return (float(ci.low), float(ci.high))


# --------------------------------------------------------------------------
# invariant checks


@dataclass
class CheckResult:
    passed: bool
    margin: float
    detail: str = ""
    offender: dict | None = None


@dataclass
class InvariantReport:
    engine: str
    checks: dict[str, CheckResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_json(self) -> str:
        return json.dumps(
            {"engine": self.engine, "passed": self.passed, "checks": {k: asdict(v) for k, v in self.checks.items()}},
            indent=2,
            sort_keys=True,
        )

    def summary(self) -> str:
        lines = [f"invariants [{self.engine}]: {'PASS' if self.passed else 'FAIL'}"]
        for name, c in self.checks.items():
            tag = "ok  " if c.passed else "FAIL"
            extra = f"  offender={c.offender}" if c.offender else ""
            lines.append(f"  {tag} {name:<20} margin={c.margin:.3e} {c.detail}{extra}")
        return "\n".join(lines)


def _worst(values: np.ndarray, result, detail: str, tol: float) -> CheckResult:
    """``values`` has shape (..., replicas); positive entries are violations."""
    if values.size == 0:
        return CheckResult(True, 0.0, detail)
    flat = values.reshape(-1, values.shape[-1]).max(axis=0) if values.ndim > 1 else values
    worst = int(np.argmax(flat))
    margin = float(flat[worst])
    passed = margin <= tol
    offender = None if passed else {"replica": worst, **result.replica_seed(worst)}
    return CheckResult(passed, margin, detail, offender)


def check_invariants(result, logs=None, tol: float = 1e-12) -> InvariantReport:
    """Check the kinematic and mass invariants of an ensemble result.

    ``result`` is an :class:`~slowing.ensemble.EnsembleResult`. When micro
    trajectory ``logs`` are given (one per replica, in replica order), the
    event sequences are checked as well. Margins are the worst violation
    (<= 0 means satisfied with room to spare), except ``support`` which
    reports the largest ratio |x - x0| / (v0 t).
    """
    report = InvariantReport(engine=result.engine)
    speed, arc, stopped, times = result.speed, result.arc, result.stopped, result.times
    v0 = result.v0

    increase = np.diff(speed, axis=0) if len(times) > 1 else np.zeros((1, result.replicas))
    initial_excess = speed - v0[None, :]
    report.checks["speed_nonincreasing"] = _worst(
        np.concatenate([increase, initial_excess]), result, "max speed increase", tol
    )

    backwards = -np.diff(arc, axis=0) if len(times) > 1 else np.zeros((1, result.replicas))
    report.checks["direction_constant"] = _worst(
        np.concatenate([backwards, -arc]), result, "max backward arc motion", tol
    )

    reach = v0[None, :] * times[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(reach > 0, arc / reach, np.where(arc > 0, np.inf, 0.0))
    sup = _worst(ratio - 1.0, result, "", tol)
    sup.margin = float(ratio.max()) if ratio.size else 0.0
    sup.detail = "max |x-x0|/(v0 t)"
    report.checks["support"] = sup

    bad = (stopped & (speed != 0)) | (~stopped & ~(speed > 0)) | ~np.isfinite(speed)
    mass = _worst(bad.astype(float), result, f"replicas={result.replicas}", 0.0)
    report.checks["mass_conservation"] = mass

    reopened = (stopped[:-1] & ~stopped[1:]) | (stopped[:-1] & (np.diff(arc, axis=0) != 0))
    report.checks["stopped_absorbing"] = _worst(reopened.astype(float), result, "", 0.0)

    for name, phi in (("mass_flux_s", lambda s: s), ("mass_flux_sqrt", np.sqrt)):
        means = phi(speed**2).mean(axis=1)
        rise = np.diff(means) if len(means) > 1 else np.zeros(1)
        k = int(np.argmax(rise))
        margin = float(rise[k])
        report.checks[name] = CheckResult(
            margin <= tol, margin, "max rise of ensemble mean", None if margin <= tol else {"snapshot": k + 1}
        )

    if logs is not None:
        worst, who = -math.inf, None
        for i, log in enumerate(logs):
            v = np.array([e.speed for e in log.events] or [log.v0])
            t = np.array([e.time for e in log.events] or [0.0])
            inc = float(np.max(np.diff(np.concatenate([[log.v0], v])), initial=-math.inf))
            back = float(np.max(-np.diff(t), initial=-math.inf))
            m = max(inc, back)
            if m > worst:
                worst, who = m, i
        passed = worst <= tol
        report.checks["log_monotone"] = CheckResult(
            passed,
            worst,
            "max speed increase / time reversal in event logs",
            None if passed else {"replica": who, **result.replica_seed(who)},
        )
    return report
