"""Seeded replica streams, initial laws and the ensemble result container.

Replicas are split into fixed blocks of ``BLOCK_SIZE``; block ``b`` draws from
its own PCG64 stream keyed by ``(master_seed, b)``. The split depends only on
the replica count, so results do not depend on how many worker threads run
the blocks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .analysis import SpeedDistribution

BLOCK_SIZE = 4096


def block_rng(master_seed: int, block: int) -> np.random.Generator:
    """PCG64 generator for one replica block."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.PCG64(seq))


def block_slices(replicas: int, block_size: int = BLOCK_SIZE) -> list[slice]:
    return [slice(start, min(start + block_size, replicas)) for start in range(0, replicas, block_size)]


def run_blocks(
    work: Callable[[np.random.Generator, slice], dict],
    replicas: int,
    master_seed: int,
    threads: int = 1,
) -> list[dict]:
    """Run ``work(rng, replica_slice)`` for every block, returned in block order."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    jobs = [(block_rng(master_seed, b), sl) for b, sl in enumerate(block_slices(replicas))]
    if threads <= 1 or len(jobs) == 1:
        return [work(rng, sl) for rng, sl in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: work(*job), jobs))


@dataclass(frozen=True)
class InitialLaw:
    """Initial speed law with compact support in (0, R].

    ``kind="point"`` puts all mass at ``speed``; ``kind="uniform"`` spreads
    it uniformly over ``[low, high]``. Directions are isotropic.
    """

    kind: str
    speed: float = 1.0
    low: float = 0.0
    high: float = 0.0
    R: float | None = None

    def __post_init__(self):
        if self.kind == "point":
            if not self.speed > 0:
                raise ValueError("point initial law needs speed > 0")
        elif self.kind == "uniform":
            if not 0 < self.low < self.high:
                raise ValueError("uniform initial law needs 0 < low < high")
        else:
            raise ValueError(f"unknown initial law kind {self.kind!r}")
        if self.R is not None and self.max_speed > self.R:
            raise ValueError("initial speeds exceed the bound R")

    @property
    def max_speed(self) -> float:
        return self.speed if self.kind == "point" else self.high

    @property
    def bound(self) -> float:
        return self.R if self.R is not None else self.max_speed

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "point":
            return np.full(n, self.speed)
        return rng.uniform(self.low, self.high, size=n)

    def mean(self, fn: Callable[[np.ndarray], np.ndarray], nodes: int = 200) -> float:
        """Exact (Gauss-Legendre) expectation of ``fn(speed)`` under the law."""
        if self.kind == "point":
            return float(fn(np.array([self.speed]))[0])
        x, w = np.polynomial.legendre.leggauss(nodes)
        r = 0.5 * (self.high - self.low) * x + 0.5 * (self.high + self.low)
        return float(0.5 * np.sum(w * fn(r)))


def sample_directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass
class EnsembleResult:
    """Per-replica state of an ensemble at a list of snapshot times.

    Arrays indexed ``[snapshot, replica]``. A replica carries unit mass and
    sits either in the moving part (``stopped`` False, ``speed`` > 0) or in
    the stopped mass at zero speed.
    """

    engine: str
    times: np.ndarray
    speed: np.ndarray
    arc: np.ndarray
    stopped: np.ndarray
    v0: np.ndarray
    master_seed: int
    directions: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def replicas(self) -> int:
        return self.v0.shape[0]

    def moving(self, k: int = -1) -> SpeedDistribution:
        keep = ~self.stopped[k]
        return SpeedDistribution(self.speed[k, keep], provenance=self.engine)

    def stopped_fraction(self, k: int = -1) -> float:
        return float(self.stopped[k].mean())

    def positions(self, k: int = -1) -> np.ndarray:
        if self.directions is None:
            raise ValueError("ensemble was run without full positions")
        return self.arc[k][:, None] * self.directions

    def replica_seed(self, replica: int) -> dict:
        """Information needed to replay one replica."""
        return {"master_seed": self.master_seed, "block": replica // BLOCK_SIZE, "offset": replica % BLOCK_SIZE}


def merge_blocks(engine: str, times: Sequence[float], parts: list[dict], master_seed: int) -> EnsembleResult:
    """Concatenate block outputs (already in block order) into one result."""
    cat = lambda key, axis=1: np.concatenate([p[key] for p in parts], axis=axis)  # noqa: E731
    directions = None
    if parts[0].get("directions") is not None:
        directions = np.concatenate([p["directions"] for p in parts], axis=0)
    extras = {}
    for key in parts[0].get("extras", {}):
        vals = [p["extras"][key] for p in parts]
        extras[key] = np.concatenate(vals) if isinstance(vals[0], np.ndarray) else sum(vals, [])
    return EnsembleResult(
        engine=engine,
        times=np.asarray(times, dtype=float),
        speed=cat("speed"),
        arc=cat("arc"),
        stopped=cat("stopped"),
        v0=cat("v0", axis=0),
        master_seed=master_seed,
        directions=directions,
        extras=extras,
    )
