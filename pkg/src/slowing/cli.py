"""Command-line front end: config ingestion, experiment runs and result files.

Usage::

    slowing {micro,meso,kinetic,compare,converge} --config run.yaml
            [--threads N] [--seed S] [--out DIR]

Exit codes: 0 success, 2 config error, 3 numeric-contract violation.
Data files (CSV, summary JSON) depend only on the config and seed; wall
clock and host details go to ``metadata.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .analysis import SpeedDistribution, binomial_ci, check_invariants, w1_stderr, wasserstein1
from .ensemble import EnsembleResult, InitialLaw
from .kinetic import CollisionKernel, NumericContractError, SpeedGrid, solve_forward
from .meso import run_meso_ensemble
from .micro import DEFAULT_STOP_FRACTION, STOP_RULES, ModelParams, overlap_statistics, run_micro_ensemble
from .profile import SlowingProfile, affine_profile, constant_profile, tabulated_profile

SUBCOMMANDS = ("micro", "meso", "kinetic", "compare", "converge")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class KineticSettings:
    cells: int = 2000
    dt: float | None = None
    snapshot_every: int = 1


@dataclass
class ExperimentConfig:
    d: int
    profile: dict
    kappa: float
    lambda_intensity: float
    initial_law: dict
    t_final: float
    replicas: int
    master_seed: int
    epsilons: list[float] = field(default_factory=list)
    snapshot_times: list[float] = field(default_factory=list)
    stop_threshold: float | None = None
    stop_rule: str = "absorbed"
    overlap_tubes: int = 0
    kinetic: KineticSettings = field(default_factory=KineticSettings)
    output: str = "out"

    # derived objects -----------------------------------------------------

    def build_profile(self) -> SlowingProfile:
        spec = dict(self.profile)
        kind = spec.pop("kind")
        if kind == "constant":
            return constant_profile(float(spec.get("s0", 1.0)))
        if kind == "affine":
            return affine_profile(float(spec["s0"]), float(spec["slope"]), float(spec.get("v_max", math.inf)))
        return tabulated_profile(np.asarray(spec["speeds"], float), np.asarray(spec["values"], float))

    def build_law(self) -> InitialLaw:
        return InitialLaw(**self.initial_law)

    def params(self, epsilon: float | None = None) -> ModelParams:
        if epsilon is None:
            epsilon = self.epsilons[-1] if self.epsilons else 1.0
        return ModelParams(self.d, float(epsilon), self.kappa, self.lambda_intensity)

    @property
    def stop_fraction(self) -> float:
        if self.stop_threshold is None:
            return DEFAULT_STOP_FRACTION
        return self.stop_threshold / self.build_law().bound

    def canonical(self) -> dict:
        out = asdict(self)
        out.pop("output")
        return out

    def sha256(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# validation


def _number(raw: dict, key: str, default=None, *, positive=False, nonneg=False, integer=False):
    if key not in raw:
        if default is None:
            raise ConfigError(key, "missing required field")
        return default
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    if positive and not value > 0:
        raise ConfigError(key, f"must be > 0, got {value!r}")
    if nonneg and value < 0:
        raise ConfigError(key, f"must be >= 0, got {value!r}")
    return int(value) if integer else float(value)


def _profile_spec(raw) -> dict:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError("profile", "expected a mapping with a 'kind' key")
    kind = raw["kind"]
    name = lambda k: f"profile.{k}"  # noqa: E731
    if kind == "constant":
        s0 = _number(raw, "s0", 1.0, positive=True)
        return {"kind": kind, "s0": s0}
    if kind == "affine":
        try:
            s0 = _number(raw, "s0", positive=True)
            slope = _number(raw, "slope")
            v_max = _number(raw, "v_max", math.inf, positive=True)
        except ConfigError as err:
            raise ConfigError(name(err.field), str(err).split(": ", 1)[1]) from None
        if slope < 0 and not math.isfinite(v_max):
            raise ConfigError(name("v_max"), "a negative slope needs a finite v_max")
        if slope < 0 and s0 + slope * v_max <= 0:
            raise ConfigError(name("slope"), "profile must stay positive on [0, v_max]")
        return {"kind": kind, "s0": s0, "slope": slope, "v_max": v_max}
    if kind == "tabulated":
        speeds, values = raw.get("speeds"), raw.get("values")
        if not isinstance(speeds, list) or not isinstance(values, list) or len(speeds) != len(values) or len(speeds) < 2:
            raise ConfigError(name("speeds"), "need equal-length lists 'speeds' and 'values' with >= 2 nodes")
        sp = np.asarray(speeds, float)
        if sp[0] != 0 or np.any(np.diff(sp) <= 0):
            raise ConfigError(name("speeds"), "must start at 0 and increase strictly")
        if np.any(np.asarray(values, float) <= 0):
            raise ConfigError(name("values"), "must all be > 0")
        return {"kind": kind, "speeds": [float(x) for x in speeds], "values": [float(x) for x in values]}
    raise ConfigError("profile.kind", f"unknown kind {kind!r} (constant, affine, tabulated)")


def _law_spec(raw) -> dict:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError("initial_law", "expected a mapping with a 'kind' key")
    kind = raw["kind"]
    try:
        if kind == "point":
            spec = {"kind": kind, "speed": _number(raw, "speed", positive=True)}
            top = spec["speed"]
        elif kind == "uniform":
            spec = {"kind": kind, "low": _number(raw, "low", positive=True), "high": _number(raw, "high", positive=True)}
            if not spec["low"] < spec["high"]:
                raise ConfigError("high", "must exceed low")
            top = spec["high"]
        else:
            raise ConfigError("kind", f"unknown kind {kind!r} (point, uniform)")
        spec["R"] = _number(raw, "R", top, positive=True)
    except ConfigError as err:
        raise ConfigError(f"initial_law.{err.field}", str(err).split(": ", 1)[1]) from None
    if top > spec["R"]:
        raise ConfigError("initial_law.R", "initial speeds must not exceed R")
    return spec


def validate_config(raw: Any) -> ExperimentConfig:
    """Check a parsed config mapping and return the typed config."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    known = {f for f in ExperimentConfig.__dataclass_fields__} | {"epsilon"}
    for key in raw:
        if key not in known:
            raise ConfigError(str(key), "unknown field")
    d = _number(raw, "d", integer=True)
    if d < 2:
        raise ConfigError("d", f"dimension must be >= 2, got {d}")
    kappa = _number(raw, "kappa", positive=True)
    lam = _number(raw, "lambda_intensity", nonneg=True)
    t_final = _number(raw, "t_final", nonneg=True)
    replicas = _number(raw, "replicas", integer=True, positive=True)
    seed = _number(raw, "master_seed", integer=True, nonneg=True)

    eps_raw = raw.get("epsilons", [raw["epsilon"]] if "epsilon" in raw else [])
    if not isinstance(eps_raw, list):
        raise ConfigError("epsilons", "expected a list")
    epsilons = []
    for i, e in enumerate(eps_raw):
        if isinstance(e, bool) or not isinstance(e, (int, float)) or not e > 0:
            raise ConfigError(f"epsilons[{i}]", f"must be > 0, got {e!r}")
        epsilons.append(float(e))
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ConfigError("epsilons", "must be strictly decreasing")

    snaps = raw.get("snapshot_times", [])
    if not isinstance(snaps, list):
        raise ConfigError("snapshot_times", "expected a list")
    snapshot_times = []
    for i, s in enumerate(snaps):
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not 0 <= s <= t_final:
            raise ConfigError(f"snapshot_times[{i}]", f"must lie in [0, t_final], got {s!r}")
        snapshot_times.append(float(s))

    law = _law_spec(raw.get("initial_law"))
    stop_threshold = None
    if raw.get("stop_threshold") is not None:
        stop_threshold = _number(raw, "stop_threshold", positive=True)
        if stop_threshold >= law["R"]:
            raise ConfigError("stop_threshold", "must be well below R")
    stop_rule = raw.get("stop_rule", "absorbed")
    if stop_rule not in STOP_RULES:
        raise ConfigError("stop_rule", f"must be one of {STOP_RULES}")

    kin_raw = raw.get("kinetic", {}) or {}
    if not isinstance(kin_raw, dict):
        raise ConfigError("kinetic", "expected a mapping")
    try:
        kinetic = KineticSettings(
            cells=_number(kin_raw, "cells", 2000, integer=True, positive=True),
            dt=_number(kin_raw, "dt", positive=True) if kin_raw.get("dt") is not None else None,
            snapshot_every=_number(kin_raw, "snapshot_every", 1, integer=True, positive=True),
        )
    except ConfigError as err:
        raise ConfigError(f"kinetic.{err.field}", str(err).split(": ", 1)[1]) from None
    if kinetic.cells < 2:
        raise ConfigError("kinetic.cells", "need at least 2 cells")

    output = raw.get("output", "out")
    if not isinstance(output, str):
        raise ConfigError("output", "expected a path string")
    return ExperimentConfig(
        d=d,
        profile=_profile_spec(raw.get("profile", {"kind": "constant"})),
        kappa=kappa,
        lambda_intensity=lam,
        initial_law=law,
        t_final=t_final,
        replicas=replicas,
        master_seed=seed,
        epsilons=epsilons,
        snapshot_times=snapshot_times,
        stop_threshold=stop_threshold,
        stop_rule=stop_rule,
        overlap_tubes=_number(raw, "overlap_tubes", 0, integer=True, nonneg=True),
        kinetic=kinetic,
        output=output,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as err:
        raise ConfigError("--config", f"cannot read {path}: {err.strerror}") from None
    except yaml.YAMLError as err:
        raise ConfigError("--config", f"not valid YAML: {err}") from None
    return validate_config(raw)


# --------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


class Writer:
    """Writes deterministic data files plus one metadata file per run."""

    def __init__(self, out: Path, config: ExperimentConfig):
        self.out = out
        self.config = config
        self.files: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    @property
    def header(self) -> str:
        return f"# config_sha256={self.config.sha256()} master_seed={self.config.master_seed}\n"

    def csv(self, name: str, columns: list[str], rows) -> Path:
        path = self.out / name
        with path.open("w", newline="\n") as fh:
            fh.write(self.header)
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        self.files.append(name)
        return path

    def json(self, name: str, payload: dict) -> Path:
        body = {"config_sha256": self.config.sha256(), "master_seed": self.config.master_seed, **payload}
        path = self.out / name
        path.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")
        self.files.append(name)
        return path

    def metadata(self, command: str, threads: int, started: float) -> None:
        meta = {
            "command": command,
            "threads": threads,
            "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
            "wall_seconds": round(time.time() - started, 3),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "package_version": __version__,
            "config_sha256": self.config.sha256(),
            "master_seed": self.config.master_seed,
            "config": self.config.canonical(),
            "files": sorted(self.files),
        }
        (self.out / "metadata.json").write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else str(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def ensemble_rows(res: EnsembleResult):
    for i in range(res.replicas):
        for k, t in enumerate(res.times):
            yield (i, t, res.speed[k, i], res.arc[k, i], res.stopped[k, i])


def snapshot_summary(res: EnsembleResult) -> list[dict]:
    out = []
    n = res.replicas
    for k, t in enumerate(res.times):
        stopped = int(res.stopped[k].sum())
        lo, hi = binomial_ci(stopped, n)
        moving = res.speed[k, ~res.stopped[k]]
        entry = {"t": t, "stopped_fraction": stopped / n, "stopped_ci95": [lo, hi], "moving_fraction": 1 - stopped / n}
        sp = res.speed[k]
        entry["mean_speed"] = float(sp.mean())
        entry["mean_speed_stderr"] = float(sp.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        entry["mean_speed_sq"] = float((sp**2).mean())
        entry["moving_mean_speed"] = float(moving.mean()) if moving.size else None
        out.append(entry)
    return out


def write_ensemble(writer: Writer, res: EnsembleResult) -> dict:
    name = res.engine
    writer.csv(f"{name}.csv", ["replica", "t", "speed", "arc_length", "stopped_flag"], ensemble_rows(res))
    snaps = snapshot_summary(res)
    writer.csv(
        f"{name}_snapshots.csv",
        ["t", "moving_mass", "stopped_mass", "mean_speed"],
        ((s["t"], s["moving_fraction"], s["stopped_fraction"], s["mean_speed"]) for s in snaps),
    )
    report = check_invariants(res)
    summary = {"engine": name, "replicas": res.replicas, "snapshots": snaps, "invariants": json.loads(report.to_json())}
    writer.json(f"{name}_summary.json", summary)
    print(report.summary())
    return summary


# --------------------------------------------------------------------------
# experiments


def run_micro(cfg: ExperimentConfig, threads: int, epsilon: float | None = None) -> EnsembleResult:
    if not cfg.epsilons:
        raise ConfigError("epsilons", "the micro engine needs an obstacle radius ('epsilon' or 'epsilons')")
    return run_micro_ensemble(
        cfg.build_profile(),
        cfg.params(epsilon),
        cfg.build_law(),
        cfg.t_final,
        cfg.replicas,
        cfg.master_seed,
        snapshot_times=cfg.snapshot_times,
        stop_fraction=cfg.stop_fraction,
        stop_rule=cfg.stop_rule,
        threads=threads,
    )


def run_meso(cfg: ExperimentConfig, threads: int) -> EnsembleResult:
    # Seed offset keeps meso draws independent of the micro draws in compare runs.
    return run_meso_ensemble(
        cfg.build_profile(),
        cfg.params(),
        cfg.build_law(),
        cfg.t_final,
        cfg.replicas,
        cfg.master_seed + 1,
        snapshot_times=cfg.snapshot_times,
        threads=threads,
    )


def initial_grid(cfg: ExperimentConfig) -> SpeedGrid:
    law = cfg.build_law()
    cells = cfg.kinetic.cells
    if law.kind == "point":
        return SpeedGrid.point_mass(law.speed, law.bound, cells)
    return SpeedGrid.uniform(law.low, law.high, law.bound, cells)


def run_kinetic(cfg: ExperimentConfig):
    kernel = CollisionKernel.from_params(cfg.build_profile(), cfg.params())
    grid = initial_grid(cfg)
    rate = kernel.sigma * float(grid.speeds.max())
    dt = cfg.kinetic.dt if cfg.kinetic.dt is not None else (0.05 / rate if rate > 0 else max(cfg.t_final, 1.0))
    return kernel, solve_forward(kernel, grid, cfg.t_final, dt, cfg.kinetic.snapshot_every)


def write_kinetic(writer: Writer, kernel, sol) -> dict:
    rows = (
        (t, r, m, sol.stopped[k]) for k, t in enumerate(sol.times) for r, m in zip(sol.speeds, sol.weights[k])
    )
    writer.csv("kinetic.csv", ["t", "cell_center", "mass", "stopped_mass"], rows)
    drift = float(np.max(np.abs(sol.totals - sol.totals[0])))
    final = sol.grid()
    summary = {
        "engine": "kinetic",
        "cells": int(sol.speeds.size),
        "steps_recorded": int(sol.times.size),
        "final_stopped_mass": float(sol.stopped[-1]),
        "final_mean_speed": float(np.sum(final.weights * final.speeds)),
        "max_mass_drift": drift,
    }
    writer.json("kinetic_summary.json", summary)
    return summary


def compare_pair(a: EnsembleResult | SpeedGrid, b: EnsembleResult) -> dict:
    """W1 between moving parts and the stopped-fraction gap, with MC scales."""
    if isinstance(a, SpeedGrid):
        pa, fa, sa_w, sa_f = a.moving, a.stopped_mass / a.total, 0.0, 0.0
    else:
        pa, fa = a.moving(), a.stopped_fraction()
        sa_w, sa_f = w1_stderr(pa), math.sqrt(fa * (1 - fa) / a.replicas)
    pb, fb = b.moving(), b.stopped_fraction()
    sb_w, sb_f = w1_stderr(pb), math.sqrt(fb * (1 - fb) / b.replicas)
    return {
        "w1_moving": wasserstein1(pa, pb),
        "w1_stderr": math.hypot(sa_w, sb_w),
        "stopped_gap": abs(fa - fb),
        "stopped_stderr": math.hypot(sa_f, sb_f),
    }


def full_law_w1(a: EnsembleResult, b: EnsembleResult) -> float:
    """W1 between full speed laws, stopped mass sitting at speed 0."""
    return wasserstein1(SpeedDistribution(a.speed[-1]), SpeedDistribution(b.speed[-1]))


def cmd_micro(cfg, writer, threads):
    return {"micro": write_ensemble(writer, run_micro(cfg, threads))}


def cmd_meso(cfg, writer, threads):
    return {"meso": write_ensemble(writer, run_meso(cfg, threads))}


def cmd_kinetic(cfg, writer, threads):
    kernel, sol = run_kinetic(cfg)
    return {"kinetic": write_kinetic(writer, kernel, sol)}


def cmd_compare(cfg, writer, threads):
    micro = run_micro(cfg, threads)
    meso = run_meso(cfg, threads)
    kernel, sol = run_kinetic(cfg)
    write_ensemble(writer, micro)
    write_ensemble(writer, meso)
    write_kinetic(writer, kernel, sol)
    pairs = {
        "micro_vs_meso": compare_pair(micro, meso),
        "kinetic_vs_meso": compare_pair(sol.grid(), meso),
        "kinetic_vs_micro": compare_pair(sol.grid(), micro),
    }
    cols = ["pair", "w1_moving", "w1_stderr", "stopped_gap", "stopped_stderr"]
    writer.csv("compare.csv", cols, ([name] + [v[c] for c in cols[1:]] for name, v in pairs.items()))
    print_table(cols, [[name] + [v[c] for c in cols[1:]] for name, v in pairs.items()])
    return pairs


def cmd_converge(cfg, writer, threads):
    if not cfg.epsilons:
        raise ConfigError("epsilons", "converge needs a list of obstacle radii")
    meso = run_meso(cfg, threads)
    rows = []
    for eps in cfg.epsilons:
        micro = run_micro(cfg, threads, eps)
        c = compare_pair(micro, meso)
        row = [eps, c["w1_moving"], c["stopped_gap"], c["w1_stderr"], c["stopped_stderr"], full_law_w1(micro, meso)]
        if cfg.overlap_tubes:
            length = cfg.build_law().bound * cfg.t_final
            est = overlap_statistics(cfg.params(eps), length, cfg.overlap_tubes, cfg.master_seed + 2)
            row.append(est.fraction)
        rows.append(row)
    cols = ["epsilon", "w1_to_meso", "stopped_gap", "w1_stderr", "stopped_stderr", "w1_full_law"]
    if cfg.overlap_tubes:
        cols.append("overlap_fraction")
    writer.csv("converge.csv", cols, rows)
    print_table(cols, rows)
    return {"rows": [dict(zip(cols, r)) for r in rows]}


COMMANDS = {
    "micro": cmd_micro,
    "meso": cmd_meso,
    "kinetic": cmd_kinetic,
    "compare": cmd_compare,
    "converge": cmd_converge,
}


def print_table(cols, rows) -> None:
    print("  ".join(f"{c:>16}" for c in cols))
    for r in rows:
        print("  ".join(f"{v:>16}" if isinstance(v, str) else f"{v:>16.6g}" for v in r))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slowing", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
        p.add_argument("--out", default=None, help="output directory (overrides config 'output')")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be >= 0")
            cfg.master_seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        writer = Writer(Path(args.out or cfg.output), cfg)
        COMMANDS[args.command](cfg, writer, args.threads)
        writer.metadata(args.command, args.threads, started)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericContractError as err:
        print(f"numeric contract violated: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
