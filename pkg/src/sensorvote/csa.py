"""Candidate selection: shrink the capture grid to M configs before any
capture happens, plus the capture-latency model.

Latency is the bare sum of shutter durations over captured configs, kept as
exact rationals; the published per-scene constants fall out of that sum with
no overhead term.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from . import streams
from .domain import SensorConfig, SensorGrid

STREAM_CSA = "csa"

VARIANTS = ("csa1", "csa2", "csa3")


@dataclass(frozen=True)
class CsaPolicy:
    variant: str
    m: int
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown CSA variant {self.variant!r}; expected one of {VARIANTS}")
        if self.m < 1:
            raise ValueError("m must be >= 1")


def _check_m(m: int, grid: SensorGrid) -> None:
    if not (1 <= m <= grid.size):
        raise ValueError(f"m={m} outside [1, {grid.size}]")


def csa1(grid: SensorGrid, m: int, rng: np.random.Generator) -> list[SensorConfig]:
    """Uniform sampling of m distinct configs, output in canonical order."""
    _check_m(m, grid)
    configs = grid.configs()
    picks = rng.choice(len(configs), size=m, replace=False)
    return sorted((configs[int(i)] for i in picks), key=SensorConfig.sort_key)


def csa2(grid: SensorGrid, m: int, rng: np.random.Generator) -> list[SensorConfig]:
    """Grid-stratified sampling over 2 bins per axis (8 cells).

    Each axis splits into bin0 = all levels but the highest, bin1 = the
    highest level. Cells are visited in a seeded random order, one uniform
    config drawn per visited cell, cycling (and skipping exhausted cells)
    until m configs are drawn.
    """
    _check_m(m, grid)

    def bins(levels):
        return [tuple(levels[:-1]), (levels[-1],)]

    cells = []
    for iso_bin in bins(grid.iso_levels):
        for sh_bin in bins(grid.shutter_levels):
            for ap_bin in bins(grid.aperture_levels):
                cell = sorted(
                    (SensorConfig(i, s, a) for i in iso_bin for s in sh_bin for a in ap_bin),
                    key=SensorConfig.sort_key,
                )
                cells.append(cell)

    order = rng.permutation(len(cells))
    remaining = {int(c): list(cells[int(c)]) for c in order}
    chosen: list[SensorConfig] = []
    while len(chosen) < m:
        progressed = False
        for c in order:
            pool = remaining[int(c)]
            if not pool:
                continue
            pick = int(rng.integers(len(pool)))
            chosen.append(pool.pop(pick))
            progressed = True
            if len(chosen) == m:
                break
        if not progressed:
            raise RuntimeError("ran out of configs before reaching m")
    return sorted(chosen, key=SensorConfig.sort_key)


def csa3(grid: SensorGrid, m: int, rng: np.random.Generator) -> list[SensorConfig]:
    """Cheapest-first: the m configs with the smallest shutter durations; a
    partially needed equal-shutter tier is drawn uniformly at random."""
    _check_m(m, grid)
    chosen: list[SensorConfig] = []
    for shutter in grid.shutter_levels:
        tier = sorted(
            (c for c in grid.configs() if c.shutter_s == shutter), key=SensorConfig.sort_key
        )
        need = m - len(chosen)
        if need <= 0:
            break
        if need >= len(tier):
            chosen.extend(tier)
        else:
            picks = rng.choice(len(tier), size=need, replace=False)
            chosen.extend(tier[int(i)] for i in picks)
    return sorted(chosen, key=SensorConfig.sort_key)


def select_candidates(
    grid: SensorGrid, policy: Optional[CsaPolicy], master_seed: int = 0
) -> list[SensorConfig]:
    """Resolve a policy to a concrete candidate set (full grid when None)."""
    if policy is None:
        return grid.configs()
    rng = streams.stream(master_seed, STREAM_CSA, policy.variant, policy.seed)
    fn = {"csa1": csa1, "csa2": csa2, "csa3": csa3}[policy.variant]
    return fn(grid, policy.m, rng)


def capture_latency(configs: Iterable[SensorConfig]) -> Fraction:
    """Total shutter-open time over the captured configs, exact."""
    return sum((c.shutter_s for c in configs), Fraction(0))


def capture_latency_seconds(configs: Iterable[SensorConfig]) -> float:
    return float(capture_latency(configs))
