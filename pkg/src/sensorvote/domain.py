"""Core value types: sensor settings, views, feature statistics, tunables.

Everything here is immutable after construction and safe to share across
threads. Shutter durations are exact rationals so grid enumeration and
latency sums carry no float drift; conversion to float happens only at the
edges (exposure arithmetic, latency reporting).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

ShutterLike = Union[Fraction, int, str]

PROB_SUM_TOL = 1e-9
ENTROPY_RECOMPUTE_TOL = 1e-9


def as_shutter(value: ShutterLike) -> Fraction:
    """Coerce a shutter duration to an exact Fraction.

    Accepts Fraction, int, or strings like "1/60". Floats are rejected:
    1/60 has no exact binary representation and silently accepting it would
    let drift into the canonical ordering.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value)
    raise TypeError(f"shutter must be Fraction, int, or 'p/q' string, got {type(value).__name__}")


@dataclass(frozen=True, order=True)
class SensorConfig:
    """One (ISO, shutter, aperture) triple.

    Field order matters: dataclass ordering gives the canonical total order
    ascending (iso, shutter_s, aperture_f). All tie-breaking downstream keys
    on this order, never on storage index.
    """

    iso: int
    shutter_s: Fraction
    aperture_f: float

    def __post_init__(self):
        if not isinstance(self.iso, int) or self.iso <= 0:
            raise ValueError(f"iso must be a positive integer, got {self.iso!r}")
        if not isinstance(self.shutter_s, Fraction):
            object.__setattr__(self, "shutter_s", as_shutter(self.shutter_s))
        if self.shutter_s <= 0:
            raise ValueError(f"shutter_s must be positive, got {self.shutter_s}")
        if not self.aperture_f > 0:
            raise ValueError(f"aperture_f must be positive, got {self.aperture_f}")

    def sort_key(self) -> tuple:
        return (self.iso, self.shutter_s, self.aperture_f)

    def label(self) -> str:
        return f"iso{self.iso}_s{self.shutter_s.numerator}-{self.shutter_s.denominator}_f{self.aperture_f:g}"


def canonical_order(a: SensorConfig, b: SensorConfig) -> int:
    """Total order on configs: -1 if a precedes b, 0 if equal, 1 if b precedes a."""
    ka, kb = a.sort_key(), b.sort_key()
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    return 0


@dataclass(frozen=True)
class SensorGrid:
    """Discrete capture grid: the Cartesian product of per-axis levels.

    Enumeration order is the canonical order of SensorConfig; ranks index
    into that enumeration.
    """

    iso_levels: tuple[int, ...]
    shutter_levels: tuple[Fraction, ...]
    aperture_levels: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "iso_levels", tuple(sorted(self.iso_levels)))
        object.__setattr__(
            self, "shutter_levels", tuple(sorted(as_shutter(s) for s in self.shutter_levels))
        )
        object.__setattr__(self, "aperture_levels", tuple(sorted(float(a) for a in self.aperture_levels)))
        for name in ("iso_levels", "shutter_levels", "aperture_levels"):
            levels = getattr(self, name)
            if not levels:
                raise ValueError(f"{name} must be non-empty")
            if len(set(levels)) != len(levels):
                raise ValueError(f"{name} contains duplicates: {levels}")

    @property
    def size(self) -> int:
        return len(self.iso_levels) * len(self.shutter_levels) * len(self.aperture_levels)

    def configs(self) -> list[SensorConfig]:
        """All grid configs in canonical order (fresh list, cached tuple)."""
        cached = getattr(self, "_configs", None)
        if cached is None:
            cached = tuple(
                sorted(
                    (
                        SensorConfig(i, s, a)
                        for i in self.iso_levels
                        for s in self.shutter_levels
                        for a in self.aperture_levels
                    ),
                    key=SensorConfig.sort_key,
                )
            )
            object.__setattr__(self, "_configs", cached)
        return list(cached)

    def rank(self, cfg: SensorConfig) -> int:
        """Index of cfg in the canonical enumeration."""
        try:
            return self._rank_table()[cfg]
        except KeyError:
            raise ValueError(f"config {cfg} is not on this grid") from None

    def _rank_table(self) -> dict[SensorConfig, int]:
        table = getattr(self, "_ranks", None)
        if table is None:
            table = {cfg: i for i, cfg in enumerate(self.configs())}
            object.__setattr__(self, "_ranks", table)
        return table


def default_grid() -> SensorGrid:
    """The 3x3x3 desk-scale grid: three levels per exposure-triangle axis."""
    return SensorGrid(
        iso_levels=(250, 2000, 16000),
        shutter_levels=(Fraction(1, 1000), Fraction(1, 60), Fraction(1, 4)),
        aperture_levels=(5.0, 9.0, 16.0),
    )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PhysicalView:
    """One capture of a scene under a config: linear sensor values in [0, 1]."""

    config: SensorConfig
    image: np.ndarray
    scene_id: int

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {img.shape}")
        if img.size and (float(img.min()) < 0.0 or float(img.max()) > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "image", _freeze(img))


@dataclass(frozen=True)
class LayerStats:
    """Per-layer (mean, variance) of token features. layer is 1-based."""

    layer: int
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape:
            raise ValueError(f"mean/var shape mismatch: {mean.shape} vs {var.shape}")
        if var.size and float(var.min()) < 0.0:
            raise ValueError("variance entries must be non-negative")
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "var", _freeze(var))


@dataclass(frozen=True)
class SourceStats:
    """Precomputed source-domain reference statistics, one entry per layer."""

    per_layer: tuple[LayerStats, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "per_layer", tuple(self.per_layer))
        if not self.per_layer:
            raise ValueError("SourceStats needs at least one layer")
        dims = {ls.mean.shape for ls in self.per_layer}
        if len(dims) != 1:
            raise ValueError(f"inconsistent per-layer dimensionality: {dims}")

    @property
    def n_layers(self) -> int:
        return len(self.per_layer)

    @property
    def feat_dim(self) -> int:
        return int(self.per_layer[0].mean.shape[0])

    def layer(self, index: int) -> LayerStats:
        """1-based lookup."""
        return self.per_layer[index - 1]


@dataclass(frozen=True)
class AugmentedView:
    """One digital augmentation of a capture, with its prediction."""

    parent: int
    aug_index: int
    probs: np.ndarray
    entropy_nats: float
    layer_stats: tuple[LayerStats, ...] = ()

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise ValueError("probs must be a vector")
        if probs.size and float(probs.min()) < 0.0:
            raise ValueError("probs entries must be non-negative")
        if abs(float(probs.sum()) - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probs must sum to 1 within {PROB_SUM_TOL}, got {probs.sum()!r}")
        object.__setattr__(self, "probs", _freeze(probs))
        object.__setattr__(self, "layer_stats", tuple(self.layer_stats))
        h = float(self.entropy_nats)
        upper = math.log(probs.size) if probs.size else 0.0
        if not (-ENTROPY_RECOMPUTE_TOL <= h <= upper + ENTROPY_RECOMPUTE_TOL):
            raise ValueError(f"entropy {h} outside [0, ln C]")
        recomputed = _entropy_of(probs)
        if abs(recomputed - h) > ENTROPY_RECOMPUTE_TOL:
            raise ValueError(f"stored entropy {h} does not match probs entropy {recomputed}")

    @classmethod
    def from_probs(
        cls,
        parent: int,
        aug_index: int,
        probs: np.ndarray,
        layer_stats: Sequence[LayerStats] = (),
    ) -> "AugmentedView":
        """Build from a probability vector, renormalizing in f64 so vectors
        produced at f32 working precision satisfy the sum invariant."""
        probs = np.asarray(probs, dtype=np.float64)
        probs = probs / probs.sum()
        return cls(parent, aug_index, probs, _entropy_of(probs), tuple(layer_stats))


def _entropy_of(probs: np.ndarray) -> float:
    p = probs[probs > 0.0]
    return float(max(0.0, -(p * np.log(p)).sum()))


def retained_count(gamma_pct: float, pool_size: int) -> int:
    """Size of the retained low-entropy set: max(1, floor(gamma% of pool)).

    floor with a minimum of 1 because 3% of 320 is 9.6 and the retained set
    is held at 9 by the defaults.
    """
    if pool_size <= 0:
        raise ValueError("pool must be non-empty")
    return max(1, math.floor(gamma_pct / 100.0 * pool_size))


@dataclass(frozen=True)
class PipelineParams:
    """All pipeline tunables. Defaults match the evaluated configuration."""

    n_augs: int = 64
    alpha: float = 0.3
    top_k: int = 5
    gamma_pct: float = 3.0
    n_layers: int = 3
    n_captures: int = 27
    aggregation: str = "hard_vote"
    seed: int = 0

    def __post_init__(self):
        if self.n_augs < 1:
            raise ValueError("n_augs must be >= 1")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must be in (0, 1]")
        if not (1 <= self.top_k <= self.n_captures):
            raise ValueError(f"top_k must satisfy 1 <= k <= {self.n_captures}")
        if not (0.0 < self.gamma_pct <= 100.0):
            raise ValueError("gamma_pct must be in (0, 100]")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.aggregation not in ("hard_vote", "marginalized"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @property
    def pool_size(self) -> int:
        return self.top_k * self.n_augs

    @property
    def retained_size(self) -> int:
        return retained_count(self.gamma_pct, self.pool_size)


@dataclass(frozen=True)
class VoteSet:
    """The entropy-filtered voters: (capture index, aug index) pairs with probs."""

    members: tuple[tuple[int, int], ...]
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("VoteSet must be non-empty")
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if probs.shape[0] != len(self.members) or labels.shape[0] != len(self.members):
            raise ValueError("members / probs / labels length mismatch")
        object.__setattr__(self, "members", tuple((int(i), int(n)) for i, n in self.members))
        object.__setattr__(self, "probs", _freeze(probs))
        object.__setattr__(self, "labels", _freeze(labels))

    def __len__(self) -> int:
        return len(self.members)
