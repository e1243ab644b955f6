"""Synthetic model of the causal chain scene -> measurement.

A capture integrates photons according to the exposure triangle, applies
Poisson shot noise and gain-amplified Gaussian read noise, and clamps to the
normalized full well. Information destroyed here (saturation, photon
starvation) is not recoverable downstream, which is the whole point of the
exercise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import streams
from .domain import PhysicalView, SensorConfig, SensorGrid

LOG_MID_GRAY = math.log(0.18)

# Poisson draws switch to the Gaussian approximation above this mean,
# trading exactness in the bright regime (where it is indistinguishable)
# for vectorized speed.
GAUSSIAN_SWITCH_MEAN = 50.0

STREAM_CAPTURE = "capture"
STREAM_AE_SHOT = "ae-shot"


@dataclass(frozen=True)
class Scene:
    """A static scene: relative luminance map plus its class identity.

    radiance is normalized to mean 1.0 at generation so log-exposure
    arithmetic needs no per-scene bias. signature is the unit-norm
    class-discriminative latent the synthetic feature provider decodes.
    """

    scene_id: int
    true_label: int
    radiance: np.ndarray
    signature: np.ndarray

    def __post_init__(self):
        rad = np.asarray(self.radiance, dtype=np.float32)
        if rad.ndim != 2:
            raise ValueError("radiance must be 2-D")
        if not np.isfinite(rad).all() or float(rad.min()) < 0.0:
            raise ValueError("radiance must be finite and non-negative")
        sig = np.asarray(self.signature, dtype=np.float64)
        if abs(float(np.linalg.norm(sig)) - 1.0) > 1e-6:
            raise ValueError("signature must have unit norm")
        rad.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "radiance", rad)
        object.__setattr__(self, "signature", sig)


@dataclass(frozen=True)
class Illumination:
    level_id: str
    lux_scale: float

    def __post_init__(self):
        if not self.lux_scale > 0:
            raise ValueError("lux_scale must be positive")


@dataclass(frozen=True)
class ExposureModel:
    """Parameters of the measurement chain.

    e_opt is the log-exposure of a well-formed measurement (mid-gray by
    default). photons_per_unit sets shot-noise strength: the number of
    photons collected per unit of normalized signal at reference gain.
    math.inf disables shot noise; sigma_read=0 disables read noise.
    """

    e_opt: float = LOG_MID_GRAY
    sigma_read: float = 0.0008
    iso_ref: int = 250
    full_well: float = 1.0
    photons_per_unit: float = 20000.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_read < 0 or self.iso_ref <= 0 or self.full_well <= 0:
            raise ValueError("noise/gain scales must be positive")
        if not self.photons_per_unit > 0:
            raise ValueError("photons_per_unit must be positive")


def noiseless_model(e_opt: float = LOG_MID_GRAY, iso_ref: int = 250, seed: int = 0) -> ExposureModel:
    """Degenerate model: no shot noise, no read noise. Captures become pure
    functions of exposure."""
    return ExposureModel(
        e_opt=e_opt, sigma_read=0.0, iso_ref=iso_ref, photons_per_unit=math.inf, seed=seed
    )


def config_log_gain(cfg: SensorConfig, model: ExposureModel) -> float:
    """log of the exposure factor a config applies on top of scene x light."""
    return (
        math.log(float(cfg.shutter_s))
        - 2.0 * math.log(cfg.aperture_f)
        + math.log(cfg.iso / model.iso_ref)
    )


def exposure(scene: Scene, illum: Illumination, cfg: SensorConfig, model: ExposureModel) -> float:
    """Log-exposure E of a capture before noise and saturation.

    E = ln( mean(radiance) * lux * shutter * aperture^-2 * iso/iso_ref ):
    monotone increasing in shutter and iso, decreasing in aperture.
    """
    mean_rad = float(np.asarray(scene.radiance, dtype=np.float64).mean())
    return math.log(mean_rad * illum.lux_scale) + config_log_gain(cfg, model)


def capture_rng(
    master_seed: int, scene: Scene, illum: Illumination, rank: int, shot: int = 0
) -> np.random.Generator:
    """Noise stream for one capture, keyed so parallel evaluation cannot
    reorder draws: (master seed, scene, illumination, config rank, shot)."""
    return streams.stream(
        master_seed, STREAM_CAPTURE, streams.stable_id(scene.scene_id), illum.level_id, rank, shot
    )


def capture(
    scene: Scene,
    illum: Illumination,
    cfg: SensorConfig,
    model: ExposureModel,
    rng: Optional[np.random.Generator],
) -> PhysicalView:
    """Measure the scene under cfg: Poisson photon signal, amplified read
    noise, clamp to [0, full_well]. Same inputs + same stream state give a
    bit-identical array."""
    image = capture_image(scene, illum, cfg, model, rng)
    return PhysicalView(config=cfg, image=image, scene_id=scene.scene_id)


def capture_image(
    scene: Scene,
    illum: Illumination,
    cfg: SensorConfig,
    model: ExposureModel,
    rng: Optional[np.random.Generator],
) -> np.ndarray:
    rad = scene.radiance if scene.radiance.dtype == np.float32 else scene.radiance.astype(np.float32)
    gain = cfg.iso / model.iso_ref
    base = rad * np.float32(illum.lux_scale * float(cfg.shutter_s) / (cfg.aperture_f**2))

    if math.isinf(model.photons_per_unit):
        electrons_over_phi = base
    else:
        if rng is None:
            raise ValueError("a noise stream is required when shot noise is enabled")
        photon_mean = base
        photon_mean *= np.float32(model.photons_per_unit)
        low = photon_mean <= GAUSSIAN_SWITCH_MEAN
        n_low = int(low.sum())
        if n_low == photon_mean.size:
            electrons = rng.poisson(np.float64(photon_mean)).astype(np.float32)
        elif n_low == 0:
            electrons = rng.standard_normal(photon_mean.shape, dtype=np.float32)
            electrons *= np.sqrt(photon_mean)
            electrons += photon_mean
        else:
            electrons = np.empty_like(photon_mean)
            electrons[low] = rng.poisson(np.float64(photon_mean[low]))
            high_mean = photon_mean[~low]
            electrons[~low] = high_mean + rng.standard_normal(high_mean.shape, dtype=np.float32) * np.sqrt(high_mean)
        electrons_over_phi = electrons
        electrons_over_phi /= np.float32(model.photons_per_unit)

    signal = electrons_over_phi
    signal *= np.float32(gain)
    if model.sigma_read > 0:
        if rng is None:
            raise ValueError("a noise stream is required when read noise is enabled")
        noise = rng.standard_normal(signal.shape, dtype=np.float32)
        noise *= np.float32(model.sigma_read * gain)
        signal += noise

    np.clip(signal, np.float32(0.0), np.float32(model.full_well), out=signal)
    return signal


_GAIN_CACHE: dict = {}


def _grid_log_gains(grid: SensorGrid, model: ExposureModel) -> np.ndarray:
    key = (id(grid), model.iso_ref)
    cached = _GAIN_CACHE.get(key)
    if cached is None:
        cached = np.array([config_log_gain(c, model) for c in grid.configs()])
        if len(_GAIN_CACHE) > 64:
            _GAIN_CACHE.clear()
        _GAIN_CACHE[key] = cached
    return cached


def auto_exposure(
    scene: Scene, illum: Illumination, grid: SensorGrid, model: ExposureModel
) -> SensorConfig:
    """The stand-in AE policy: the grid config minimizing |E - e_opt| on mean
    luminance, ties broken by canonical order. The real camera's algorithm is
    unknown; reports flag this policy by name."""
    if grid.size == 0:
        raise ValueError("grid is empty")
    mean_rad = float(np.asarray(scene.radiance, dtype=np.float64).mean())
    errs = np.abs(math.log(mean_rad * illum.lux_scale) + _grid_log_gains(grid, model) - model.e_opt)
    return grid.configs()[int(errs.argmin())]


def ae_protocol(
    scene: Scene,
    illum: Illumination,
    grid: SensorGrid,
    model: ExposureModel,
    master_seed: int,
    n_shots: int = 5,
) -> list[PhysicalView]:
    """n_shots stochastic captures at the AE config, each with an independent
    noise stream."""
    cfg = auto_exposure(scene, illum, grid, model)
    rank = grid.rank(cfg)
    shots = []
    for shot in range(n_shots):
        rng = streams.stream(
            master_seed,
            STREAM_AE_SHOT,
            streams.stable_id(scene.scene_id),
            illum.level_id,
            rank,
            shot,
        )
        shots.append(capture(scene, illum, cfg, model, rng))
    return shots


def illumination_presets(
    grid: Optional[SensorGrid] = None,
    model: Optional[ExposureModel] = None,
    n_levels: int = 6,
    decades: float = 3.0,
) -> list[Illumination]:
    """n_levels illuminations log-spaced over the requested decade span,
    centered so the middle grid config lands on e_opt for a mean-1 scene.

    The span mirrors "six diverse illumination settings" without claiming
    physical lux values; extremes are servable only by corner configs.
    """
    from .domain import default_grid

    grid = grid or default_grid()
    model = model or ExposureModel()
    center_cfg = grid.configs()[grid.size // 2]
    lux_center = math.exp(model.e_opt - config_log_gain(center_cfg, model))
    offsets = np.linspace(-decades / 2.0, decades / 2.0, n_levels)
    return [
        Illumination(level_id=f"L{i + 1}", lux_scale=float(lux_center * 10.0**off))
        for i, off in enumerate(offsets)
    ]
