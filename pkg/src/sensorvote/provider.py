"""Feature providers: the stand-in for a frozen visual encoder.

A provider maps a view to per-layer token statistics plus class
probabilities. The synthetic provider decodes the scene signature straight
from pixels through the shared cosine basis, so measurement damage
(saturation, photon starvation, read noise) degrades features for real; the
file-backed provider serves precomputed records keyed by
(scene_id, config_rank, aug_index).

encode is pure: all stochastic-looking terms are hashed from image content,
so repeated calls agree bit-exactly and results are independent of batch
order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import formats, streams
from .domain import LayerStats, SourceStats
from .synthworld import DEFAULT_CONTRAST, SignatureSpace, noise_probe_modes

STREAM_ANCHOR = "provider-anchor"

# tags for content-hashed noise channels
_TAG_LOGIT = 1
_TAG_OVERCONF = 2
_TAG_STAT_MEAN = 16
_TAG_STAT_VAR = 48
_TAG_DEEP_MEAN = 80
_TAG_DEEP_VAR = 112

# measured pixel noise below this RMS (f32 path residue) is not sensor noise,
# and exposure error below a micro-nat is not a real drift; zeroing both keeps
# clean, perfectly exposed views exactly on the source anchor
_NOISE_DEADBAND = 2e-4
_EXPOSURE_DEADBAND = 1e-6
_NOISE_RANK = 8


def _content_keys(m: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """64-bit content fingerprint per view from the mean and the leading
    pattern coefficients; any change to the pixels scrambles it."""
    h = streams.mix64(m.view(np.uint64))
    pu = np.ascontiguousarray(proj[:, :4], dtype=np.float32).view(np.uint64)  # [B, 2]
    h ^= streams.mix64(pu[:, 0])
    with np.errstate(over="ignore"):
        h = streams.mix64(h ^ pu[:, 1])
    return h


class ProviderError(ValueError):
    pass


@dataclass
class EncodedBatch:
    """Predictions for a batch of views plus a handle for lazy layer stats."""

    probs: np.ndarray  # [B, C], rows sum to 1 to working precision
    entropy: np.ndarray  # [B] nats
    _provider: "FeatureProvider"
    _payload: object
    _max_prob: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.probs.shape[0])

    @property
    def max_prob(self) -> np.ndarray:
        if self._max_prob is None:
            self._max_prob = self.probs.max(axis=1)
        return self._max_prob

    @property
    def labels(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def layer_stats(self, rows: np.ndarray, layers: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """(means, vars) of shape [len(rows), len(layers), feat_dim]."""
        return self._provider.batch_layer_stats(self._payload, np.asarray(rows, dtype=np.int64), tuple(layers))


class FeatureProvider:
    """Interface: read-only after construction, encode deterministic."""

    n_layers: int
    feat_dim: int
    n_classes: int
    needs_pixels: bool

    def encode_batch(
        self,
        images: Optional[np.ndarray],
        keys: Optional[Sequence[tuple[int, int, int]]] = None,
    ) -> EncodedBatch:
        raise NotImplementedError

    def batch_layer_stats(self, payload, rows: np.ndarray, layers: tuple[int, ...]):
        raise NotImplementedError

    def encode(self, image: np.ndarray, want_layers: int) -> tuple[list[LayerStats], np.ndarray]:
        """Single-view surface: per-layer stats for layers 1..want_layers plus probs."""
        if not (1 <= want_layers <= self.n_layers):
            raise ProviderError(f"want_layers={want_layers} outside [1, {self.n_layers}]")
        batch = self.encode_batch(np.asarray(image)[None, ...] if image is not None else None)
        layers = tuple(range(1, want_layers + 1))
        means, vars_ = batch.layer_stats(np.array([0]), layers)
        stats = [
            LayerStats(layer=l, mean=means[0, i], var=vars_[0, i]) for i, l in enumerate(layers)
        ]
        return stats, batch.probs[0]


@dataclass(frozen=True)
class SyntheticProviderModel:
    """Behavioral dials of the synthetic encoder.

    drift_gain: how fast shallow-layer means drift from source per nat of
        exposure error.
    noise_gain: logit degradation per unit of relative pixel noise.
    overconf_prob: chance that a badly exposed view is served as a
        near-one-hot prediction of whatever the corrupted decode believes.
    class_margin: logit scale of a perfectly exposed, clean view.
    """

    drift_gain: float = 1.0
    noise_gain: float = 12.0
    overconf_prob: float = 0.0
    class_margin: float = 16.0
    seed: int = 0
    quality_width: float = 0.8
    overconf_threshold: float = 1.2
    overconf_logit: tuple[float, float] = (7.5, 10.0)
    noise_floor: float = 1.5
    attractor_gain: float = 0.35
    noise_bias: float = 1.2
    stat_noise: float = 0.5
    chaos_gain: float = 2.5
    var_drift_frac: float = 0.5
    n_layers: int = 12
    feat_dim: int = 64
    shallow_layers: int = 3

    def __post_init__(self):
        if not (0.0 <= self.overconf_prob <= 1.0):
            raise ValueError("overconf_prob must be in [0, 1]")
        for name in ("drift_gain", "noise_gain", "stat_noise", "chaos_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (1 <= self.shallow_layers <= self.n_layers):
            raise ValueError("shallow_layers must be within [1, n_layers]")


class SyntheticProvider(FeatureProvider):
    """Decodes class identity from pixels via the shared signature space.

    Shallow layers drift smoothly with exposure error and pixel noise; deep
    layers drift chaotically per view, so affinity measured there carries no
    usable signal. Flip-invariant matching mirrors an encoder that does not
    care about mirroring.
    """

    needs_pixels = True

    def __init__(
        self,
        space: SignatureSpace,
        model: SyntheticProviderModel,
        e_opt: float,
        pattern_scale: float = DEFAULT_CONTRAST,
    ):
        self.space = space
        self.model = model
        self.e_opt = float(e_opt)
        # scene contrast the encoder was "trained" on: calibrates how much
        # pattern energy a full view carries at a given brightness
        self.pattern_scale = float(pattern_scale)
        self.n_layers = model.n_layers
        self.feat_dim = model.feat_dim
        self.n_classes = space.n_classes
        self._pixels = space.side * space.side

        rng = streams.stream(model.seed, STREAM_ANCHOR)
        d = model.feat_dim
        self._src_mean = 0.5 * rng.standard_normal((model.n_layers, d))
        self._src_var = 0.25 + 0.05 * np.abs(rng.standard_normal((model.n_layers, d)))
        drift = rng.standard_normal((model.n_layers, d))
        self._drift_dir = drift / np.linalg.norm(drift, axis=1, keepdims=True)
        vdrift = rng.standard_normal((model.n_layers, d))
        self._var_drift_dir = vdrift / np.linalg.norm(vdrift, axis=1, keepdims=True)
        ndrift = rng.standard_normal((model.n_layers, d))
        self._noise_dir = ndrift / np.linalg.norm(ndrift, axis=1, keepdims=True)
        # low-evidence inputs drift toward the classes nearest the shared
        # background texture (the encoder's "default guess" is whatever the
        # world's filler looks like); cubing sharpens the profile
        prof = (space.prototypes @ space.background_dir) ** 3
        self._prior_sim32 = (prof / np.abs(prof).max()).astype(np.float32)
        basis32 = space.basis.T.astype(np.float32)  # [pixels, dim]
        probes32 = noise_probe_modes(space.side).T.astype(np.float32)
        self._n_probes = probes32.shape[1]
        # one gemm yields pattern projection | image mean | noise probes
        self._proj_mat32 = np.ascontiguousarray(
            np.concatenate(
                [basis32, np.full((self._pixels, 1), 1.0 / self._pixels, np.float32), probes32],
                axis=1,
            )
        )
        self._basis_rowsum32 = basis32.sum(axis=0)
        protos = space.prototypes.astype(np.float32)
        self._protos_both32 = np.concatenate(
            [protos.T, (protos * space.flip_parity).T.astype(np.float32)], axis=1
        )  # [dim, 2C]
        # per-view noise is rank-NOISE_RANK: few hashed normals expanded by
        # fixed unit-column mixers (cheap, still independent across views)
        mix_cls = rng.standard_normal((_NOISE_RANK, space.n_classes))
        self._noise_mix_cls32 = (mix_cls / np.linalg.norm(mix_cls, axis=0)).astype(np.float32)
        mix_feat = rng.standard_normal((_NOISE_RANK, d))
        self._noise_mix_feat = mix_feat / np.linalg.norm(mix_feat, axis=0)
        for arr in (
            self._src_mean, self._src_var, self._drift_dir, self._var_drift_dir,
            self._noise_dir, self._prior_sim32, self._proj_mat32, self._basis_rowsum32,
            self._protos_both32, self._noise_mix_cls32, self._noise_mix_feat,
        ):
            arr.setflags(write=False)

    def source_anchor(self, layers: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray([l - 1 for l in layers])
        return self._src_mean[idx].copy(), self._src_var[idx].copy()

    def encode_batch(self, images, keys=None) -> EncodedBatch:
        if images is None:
            raise ProviderError("the synthetic provider needs pixel data")
        images = np.asarray(images)
        flat = np.ascontiguousarray(images.reshape(images.shape[0], -1), dtype=np.float32)
        if flat.shape[1] != self._pixels:
            raise ProviderError(
                f"image has {flat.shape[1]} pixels, provider expects {self._pixels}"
            )
        pixels = flat.shape[1]
        dim = self.space.dim
        proj_m = flat @ self._proj_mat32  # [B, dim + 1 + probes] f32
        m = proj_m[:, dim].astype(np.float64)
        proj = proj_m[:, :dim]
        e_est = np.log(np.clip(m, 1e-12, None))
        d_e = np.abs(e_est - self.e_opt)
        d_e[d_e < _EXPOSURE_DEADBAND] = 0.0

        # basis rows are zero-mean, so projecting the raw image equals
        # projecting the centered one up to f32 row-sum residue, corrected here
        proj = proj - proj_m[:, dim : dim + 1] * self._basis_rowsum32[None, :]
        proj_norm = np.linalg.norm(proj, axis=1)
        unit = np.divide(proj, proj_norm[:, None], out=np.zeros_like(proj), where=proj_norm[:, None] > 0)

        # encoder is flip-invariant: score both orientations, keep the better
        sims = unit @ self._protos_both32  # [B, 2C]
        sim = np.maximum(sims[:, : self.n_classes], sims[:, self.n_classes :])

        # sensor noise from the high-frequency probes (white noise is flat
        # across modes; the pattern band has no energy up there)
        noise_sq = np.square(proj_m[:, dim + 1 :]).mean(axis=1, dtype=np.float64)
        noise_est = np.sqrt(noise_sq)
        noise_est[noise_est < _NOISE_DEADBAND] = 0.0
        noise_rel = noise_est / np.clip(m, 1e-12, None)

        h = _content_keys(m, proj)

        # evidence weight: surviving pattern energy against what a full,
        # undamaged view of the source world would carry at this brightness;
        # cropping and saturation attenuate it, pushing the prediction toward
        # the prior attractor
        in_span = np.square(proj).sum(axis=1, dtype=np.float64)
        pattern_energy = np.maximum(in_span - dim * noise_sq, 0.0)
        expected = np.square(self.pattern_scale * m)
        weight = np.clip(
            np.divide(pattern_energy, expected, out=np.zeros_like(expected), where=expected > 0),
            0.0,
            1.0,
        ).astype(np.float32)
        mixed = weight[:, None] * sim
        mixed += (np.float32(self.model.attractor_gain) * (1.0 - weight))[:, None] * self._prior_sim32[None, :]

        quality = np.exp(-0.5 * np.square(d_e / self.model.quality_width)).astype(np.float32)
        g = streams.hash_normals(h, _NOISE_RANK, _TAG_LOGIT).astype(np.float32)
        eps = g @ self._noise_mix_cls32
        # sensor noise raises the softmax temperature (confidence falls);
        # direction errors come from the physical tilt of the recovery, while
        # a small fixed jitter keeps augmentations from being clones
        damp = 1.0 / (1.0 + self.model.noise_gain * noise_rel)
        scale = (self.model.class_margin * quality * damp).astype(np.float32)
        logits = scale[:, None] * mixed
        logits += np.float32(self.model.noise_floor) * eps

        if self.model.overconf_prob > 0:
            u = streams.hash_uniforms(h, 2, _TAG_OVERCONF)
            take = (d_e > self.model.overconf_threshold) & (u[:, 0] < self.model.overconf_prob)
            if take.any():
                rows = np.flatnonzero(take)
                belief = np.argmax(mixed[rows] + np.float32(1e-6) * eps[rows], axis=1)
                lo, hi = self.model.overconf_logit
                strength = (lo + u[rows, 1] * (hi - lo)).astype(np.float32)
                logits[rows] = 0.0
                logits[rows, belief] = strength

        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        entropy = -np.sum(probs * np.log(probs + np.float32(1e-38)), axis=1)

        payload = {"h": h, "d_e": d_e, "noise_rel": noise_rel}
        return EncodedBatch(probs=probs, entropy=entropy, _provider=self, _payload=payload)

    def batch_layer_stats(self, payload, rows, layers):
        model = self.model
        h = payload["h"][rows]
        d_e = payload["d_e"][rows]
        noise_rel = payload["noise_rel"][rows]
        d = self.feat_dim
        sqrt_d = math.sqrt(d)
        n = len(rows)

        means = np.empty((n, len(layers), d))
        vars_ = np.empty((n, len(layers), d))
        g_shallow = None
        if any(1 <= l <= model.shallow_layers for l in layers):
            # one measurement-wobble draw per view, shared by the shallow
            # layers (a view's noise perturbs them coherently)
            g_shallow = (
                streams.hash_normals(h, _NOISE_RANK, _TAG_STAT_MEAN) @ self._noise_mix_feat
            ) / sqrt_d
        drift = (model.drift_gain * d_e)[:, None]
        # noise pushes statistics in a consistent per-layer direction (plus a
        # small per-view wobble): noisier measurements sit farther from source
        # even after aggregation
        bias = (model.noise_bias * noise_rel)[:, None]
        wobble = (model.stat_noise * noise_rel)[:, None]
        for j, layer in enumerate(layers):
            if not (1 <= layer <= self.n_layers):
                raise ProviderError(f"layer {layer} outside [1, {self.n_layers}]")
            li = layer - 1
            if layer <= model.shallow_layers:
                means[:, j] = (
                    self._src_mean[li]
                    + drift * self._drift_dir[li]
                    + bias * self._noise_dir[li]
                    + wobble * g_shallow
                )
                vars_[:, j] = (
                    self._src_var[li]
                    + model.var_drift_frac * (drift * self._var_drift_dir[li] + bias * self._noise_dir[li])
                )
            else:
                g_m = streams.hash_normals(h, d, _TAG_DEEP_MEAN + layer) / sqrt_d
                g_v = streams.hash_normals(h, d, _TAG_DEEP_VAR + layer) / sqrt_d
                means[:, j] = self._src_mean[li] + model.chaos_gain * g_m
                vars_[:, j] = self._src_var[li] + model.var_drift_frac * model.chaos_gain * g_v
        np.clip(vars_, 0.0, None, out=vars_)
        return means, vars_


class EmbeddingFileProvider(FeatureProvider):
    """Serves precomputed records from an embedding file.

    Raises on missing keys; never looks at pixels. Probabilities are stored
    as f32 and renormalized in f64 on the way out.
    """

    needs_pixels = False

    def __init__(self, path):
        table = formats.read_embeddings(path)
        self._table = table
        self.path = str(path)
        self.n_layers = table.n_layers
        self.feat_dim = table.feat_dim
        self.n_classes = table.n_classes

    def encode_batch(self, images, keys=None) -> EncodedBatch:
        if keys is None:
            raise ProviderError("the file-backed provider requires (scene_id, config_rank, aug_index) keys")
        idx = np.empty(len(keys), dtype=np.int64)
        for i, key in enumerate(keys):
            try:
                idx[i] = self._table.keys[tuple(int(v) for v in key)]
            except KeyError:
                raise ProviderError(f"missing embedding key {tuple(key)} in {self.path}") from None
        probs = self._table.probs[idx].astype(np.float64)
        probs /= probs.sum(axis=1, keepdims=True)
        entropy = -np.sum(probs * np.log(np.where(probs > 0, probs, 1.0)), axis=1)
        return EncodedBatch(probs=probs, entropy=entropy, _provider=self, _payload=idx)

    def batch_layer_stats(self, payload, rows, layers):
        for layer in layers:
            if not (1 <= layer <= self.n_layers):
                raise ProviderError(f"layer {layer} outside [1, {self.n_layers}]")
        li = np.asarray([l - 1 for l in layers])
        idx = payload[rows]
        means = self._table.means[idx][:, li].astype(np.float64)
        vars_ = self._table.vars[idx][:, li].astype(np.float64)
        return means, vars_


def load_embedding_provider(path) -> EmbeddingFileProvider:
    return EmbeddingFileProvider(path)


def average_layer_stats(per_view: Sequence[Sequence[LayerStats]], provenance: str = "") -> SourceStats:
    """Mean of per-view means and mean of per-view variances, per layer.

    The averaging that defines source statistics; quantized to f32 so the
    on-disk representation is lossless.
    """
    if not per_view:
        raise ValueError("reference set must be non-empty")
    n_layers = len(per_view[0])
    if any(len(stats) != n_layers for stats in per_view):
        raise ValueError("views disagree on layer count")
    out = []
    for li in range(n_layers):
        group = [stats[li] for stats in per_view]
        layer_ids = {ls.layer for ls in group}
        if len(layer_ids) != 1:
            raise ValueError(f"layer index mismatch at position {li}: {layer_ids}")
        mean = np.mean([ls.mean for ls in group], axis=0)
        var = np.mean([ls.var for ls in group], axis=0)
        out.append(
            LayerStats(
                layer=group[0].layer,
                mean=mean.astype(np.float32).astype(np.float64),
                var=np.clip(var, 0.0, None).astype(np.float32).astype(np.float64),
            )
        )
    return SourceStats(per_layer=tuple(out), provenance=provenance)


def build_source_stats(
    provider: FeatureProvider,
    reference_views: Sequence[np.ndarray],
    n_layers: Optional[int] = None,
    provenance: str = "",
) -> SourceStats:
    """Encode a reference view set and average its statistics per layer."""
    views = list(reference_views)
    if not views:
        raise ValueError("reference set must be non-empty")
    n_layers = n_layers or provider.n_layers
    if not (1 <= n_layers <= provider.n_layers):
        raise ValueError(f"n_layers={n_layers} outside [1, {provider.n_layers}]")
    layers = tuple(range(1, n_layers + 1))
    batch = provider.encode_batch(np.stack([np.asarray(v) for v in views]))
    means, vars_ = batch.layer_stats(np.arange(len(views)), layers)
    per_layer = tuple(
        LayerStats(
            layer=l,
            mean=means[:, i].mean(axis=0).astype(np.float32).astype(np.float64),
            var=np.clip(vars_[:, i].mean(axis=0), 0.0, None).astype(np.float32).astype(np.float64),
        )
        for i, l in enumerate(layers)
    )
    return SourceStats(per_layer=per_layer, provenance=provenance)


def check_source_compat(stats: SourceStats, provider: FeatureProvider, needed_layers: Sequence[int]) -> None:
    """Hard error at load time when reference stats cannot serve this provider."""
    if stats.feat_dim != provider.feat_dim:
        raise ProviderError(
            f"source stats feat_dim {stats.feat_dim} != provider feat_dim {provider.feat_dim}"
        )
    if max(needed_layers) > stats.n_layers:
        raise ProviderError(
            f"source stats cover {stats.n_layers} layers, need layer {max(needed_layers)}"
        )
