"""The selection-then-vote pipeline and its comparison baselines.

Per scene: capture a library of physical views, expand each into digital
augmentations, score each capture's source affinity on its most confident
augmentations, keep the top-k captures, entropy-filter the pooled augmented
views, and aggregate the survivors' predictions by hard voting (one vote per
view's argmax) or marginalized probability.

All tie-breaks key on canonical config order and augmentation index, never
on storage order, so shuffling candidates or generation order changes
nothing.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import streams
from .camera import ExposureModel, Illumination, Scene, auto_exposure, capture_image, capture_rng
from .domain import (
    AugmentedView,
    LayerStats,
    PipelineParams,
    SensorConfig,
    SensorGrid,
    SourceStats,
    VoteSet,
    retained_count,
)
from .provider import EncodedBatch, FeatureProvider, ProviderError, check_source_compat

STREAM_AUG = "aug"
STREAM_AE_AUG = "ae-aug"
STREAM_AE_PHOTO = "ae-photo"


def aug_rng(master_seed: int, scene: Scene, rank: int) -> np.random.Generator:
    """Augmentation geometry stream, counter-split per (scene, config)."""
    return streams.stream(master_seed, STREAM_AUG, streams.stable_id(scene.scene_id), rank)

# deterministic compute-latency accounting (per encoder forward pass, plus a
# fixed per-decision overhead); wall-clock stage times are measured too but
# stay out of exported reports so runs compare byte-for-byte
ENCODE_MS_PER_VIEW = 0.35
DECISION_OVERHEAD_MS = 0.5

DEFAULT_CROP_SCALE = (0.5, 1.0)
DEFAULT_BRIGHTNESS = (0.7, 1.3)
DEFAULT_CONTRAST = (0.85, 1.2)
DEFAULT_GAMMA = (0.85, 1.2)

METHOD_MVP = "affinity_vote"
METHOD_MVP_MARGINAL = "affinity_marginal"
METHOD_CONFIDENCE = "confidence"
METHOD_CONFIDENCE_VOTE = "confidence_vote"
METHOD_AE = "ae"
METHOD_AE_PHOTO = "ae_photo"

ALL_METHODS = (
    METHOD_AE,
    METHOD_AE_PHOTO,
    METHOD_CONFIDENCE,
    METHOD_CONFIDENCE_VOTE,
    METHOD_MVP,
    METHOD_MVP_MARGINAL,
)


# ---------------------------------------------------------------------------
# digital augmentation


def _crop_geometry(rng: np.random.Generator, n: int, side: int, scale_range):
    lo, hi = scale_range
    draws = rng.random((n, 4))
    scales = lo + draws[:, 0] * (hi - lo)
    sides = np.clip(np.round(scales * side).astype(np.int64), 1, side)
    x0 = np.floor(draws[:, 1] * (side - sides + 1)).astype(np.int64)
    y0 = np.floor(draws[:, 2] * (side - sides + 1)).astype(np.int64)
    flip = draws[:, 3] < 0.5
    return sides, x0, y0, flip


_scratch_store = threading.local()


def _scratch(shape: tuple, dtype, tag: str = "") -> np.ndarray:
    """Per-thread reusable buffer; avoids re-faulting large fresh allocations
    in the per-scene hot loop. Callers must not hold the buffer across calls
    that share (shape, dtype, tag)."""
    pool = getattr(_scratch_store, "pool", None)
    if pool is None:
        pool = _scratch_store.pool = {}
    key = (shape, np.dtype(dtype).str, tag)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype=dtype)
    return buf


def _crop_index_map(sides, x0, y0, flip, out_side: int, row_offset=None) -> np.ndarray:
    """Flat nearest-neighbor source index per output pixel, one row per aug.

    Integer-exact mapping: output j samples crop cell (2j+1)*side // (2*out),
    so a full-window no-flip crop is the identity. Flips are fused into the
    column indices; row_offset shifts each aug's rows into a stacked source.
    The returned buffer is thread-local scratch."""
    n = len(sides)
    j2 = 2 * np.arange(out_side, dtype=np.int64) + 1
    loc = (j2[None, :] * sides[:, None]) // (2 * out_side)
    rows = y0[:, None] + loc
    if row_offset is not None:
        rows += row_offset[:, None]
    cols = x0[:, None] + loc
    flipped = x0[:, None] + sides[:, None] - 1 - loc
    cols = np.where(flip[:, None], flipped, cols)
    out = _scratch((n, out_side * out_side), np.int64).reshape(n, out_side, out_side)
    np.add((rows * out_side)[:, :, None], cols[:, None, :], out=out)
    return out.reshape(n, -1)


def augment_geometric(
    image: np.ndarray,
    n: int,
    rng: Optional[np.random.Generator],
    scale_range=DEFAULT_CROP_SCALE,
) -> np.ndarray:
    """n views of one image: element 0 is the untouched original, the rest are
    random-resized crops with 50% horizontal flips. Returns [n, H, W]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    image = np.asarray(image, dtype=np.float32)
    out = np.empty((n,) + image.shape, dtype=np.float32)
    out[0] = image
    if n > 1:
        if rng is None:
            raise ValueError("an rng stream is required for n > 1")
        side = image.shape[0]
        idx = _crop_index_map(*_crop_geometry(rng, n - 1, side, scale_range), side)
        np.take(image.reshape(-1), idx.reshape(-1), out=out[1:].reshape(-1))
    return out


def _bank_index(
    n: int, rngs: Sequence[np.random.Generator], side: int, m: int, scale_range=DEFAULT_CROP_SCALE
) -> np.ndarray:
    """Gather index for a full augmentation bank over m stacked captures.

    Rows [i*n, (i+1)*n) are the n views of capture i; row i*n is the identity
    crop (exact under the integer map). Returns thread-local scratch."""
    if n == 1:
        base = _scratch((m, side * side), np.int64, tag="bank-index")
        base[:] = np.arange(m * side * side, dtype=np.int64).reshape(m, -1)
        return base
    geom = np.empty((m * n, 4), dtype=np.int64)  # side, x0, y0, flip
    for i, rng in enumerate(rngs):
        blk = geom[i * n : (i + 1) * n]
        blk[0] = (side, 0, 0, 0)
        sides, x0, y0, flip = _crop_geometry(rng, n - 1, side, scale_range)
        blk[1:, 0] = sides
        blk[1:, 1] = x0
        blk[1:, 2] = y0
        blk[1:, 3] = flip
    row_offset = np.repeat(np.arange(m, dtype=np.int64) * side, n)
    return _crop_index_map(
        geom[:, 0], geom[:, 1], geom[:, 2], geom[:, 3].astype(bool), side, row_offset=row_offset
    )


def _augment_bank(
    images: np.ndarray,
    n: int,
    rngs: Sequence[np.random.Generator],
    scale_range=DEFAULT_CROP_SCALE,
    out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Augment every capture in one gather, bitwise equal per block to
    augment_geometric(images[i], n, rngs[i]).

    Without out, returns thread-local scratch; callers must finish with it
    before the next bank call on the same thread. Keep the source image set
    small (cache-resident): gather throughput collapses otherwise.
    """
    m, side, _ = images.shape
    if out is None:
        out = _scratch((m * n, side, side), np.float32)
    index = _bank_index(n, rngs, side, m, scale_range)
    np.take(images.reshape(-1), index.reshape(-1), out=out.reshape(-1))
    return out


def _photometric_apply(
    images: np.ndarray, draws: np.ndarray, brightness, contrast, gamma
) -> np.ndarray:
    out = np.asarray(images, dtype=np.float32).copy()
    g_lo, g_hi = gamma
    if not (g_lo == g_hi == 1.0):
        g = (g_lo + draws[:, 2] * (g_hi - g_lo)).astype(np.float32)
        out = np.power(np.clip(out, 0.0, None), g[:, None, None])
    c_lo, c_hi = contrast
    if not (c_lo == c_hi == 1.0):
        c = (c_lo + draws[:, 1] * (c_hi - c_lo)).astype(np.float32)
        out = (out - 0.5) * c[:, None, None] + 0.5
    b_lo, b_hi = brightness
    if not (b_lo == b_hi == 1.0):
        b = (b_lo + draws[:, 0] * (b_hi - b_lo)).astype(np.float32)
        out = out * b[:, None, None]
    return np.clip(out, 0.0, 1.0)


def photometric_jitter(
    images: np.ndarray,
    rng: np.random.Generator,
    brightness=DEFAULT_BRIGHTNESS,
    contrast=DEFAULT_CONTRAST,
    gamma=DEFAULT_GAMMA,
) -> np.ndarray:
    """Per-image brightness/contrast/gamma jitter on grayscale values, clamped
    to [0, 1]. Degenerate ranges ((1, 1)) skip their transform exactly."""
    images = np.asarray(images, dtype=np.float32)
    draws = rng.random((images.shape[0], 3))
    return _photometric_apply(images, draws, brightness, contrast, gamma)


def augment_photometric(
    image: np.ndarray,
    n: int,
    rng: np.random.Generator,
    brightness=DEFAULT_BRIGHTNESS,
    contrast=DEFAULT_CONTRAST,
    gamma=DEFAULT_GAMMA,
) -> np.ndarray:
    """n photometric variants of one image; deterministic per stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    stack = np.repeat(np.asarray(image, dtype=np.float32)[None], n, axis=0)
    return photometric_jitter(stack, rng, brightness, contrast, gamma)


# ---------------------------------------------------------------------------
# scalar operations (spec surface) and their array kernels


def shannon_entropy(probs) -> float:
    """H = -sum p ln p in nats, with 0 ln 0 = 0. Rejects non-normalized input."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probs must be a vector")
    if p.size == 0:
        raise ValueError("probs must be non-empty")
    if float(p.min()) < 0.0:
        raise ValueError("probabilities must be non-negative")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probs sum to {total!r}, not 1")
    nz = p[p > 0.0]
    return float(max(0.0, -(nz * np.log(nz)).sum()))


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    return -np.sum(np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0), axis=1)


def confident_rows(max_prob: np.ndarray, entropy: np.ndarray, n_keep: int) -> np.ndarray:
    """Indices of the n_keep most confident rows; ties by entropy ascending,
    then row index ascending. Returned in rank order."""
    order = np.lexsort((np.arange(len(max_prob)), entropy, -max_prob))
    return order[:n_keep]


def confident_subset(augs: Sequence[AugmentedView], alpha: float) -> list[int]:
    """Indices of the top-ceil(alpha*N) augmentations by max probability."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must be in (0, 1]")
    if not augs:
        raise ValueError("augmentation set must be non-empty")
    n_keep = max(1, math.ceil(alpha * len(augs)))
    maxp = np.array([float(v.probs.max()) for v in augs])
    ent = np.array([v.entropy_nats for v in augs])
    return [int(i) for i in confident_rows(maxp, ent, n_keep)]


def aggregate_stats(subset: Sequence[AugmentedView], n_layers: int) -> list[LayerStats]:
    """Arithmetic mean of per-view means and per-view variances, per layer."""
    if not subset:
        raise ValueError("subset must be non-empty")
    for v in subset:
        if len(v.layer_stats) < n_layers:
            raise ValueError(f"view carries {len(v.layer_stats)} layers, need {n_layers}")
    out = []
    for li in range(n_layers):
        layer_ids = {v.layer_stats[li].layer for v in subset}
        if len(layer_ids) != 1:
            raise ValueError(f"layer mismatch at position {li}: {layer_ids}")
        mean = np.mean([v.layer_stats[li].mean for v in subset], axis=0)
        var = np.mean([v.layer_stats[li].var for v in subset], axis=0)
        out.append(LayerStats(layer=layer_ids.pop(), mean=mean, var=var))
    return out


@dataclass(frozen=True)
class AffinityScore:
    """Source-affinity of one capture: 0 means an exact statistical match,
    more negative means farther from the source distribution."""

    capture_index: int
    score: float

    def __post_init__(self):
        if self.score > 1e-9:
            raise ValueError(f"affinity score must be <= 0, got {self.score}")
        object.__setattr__(self, "score", min(self.score, 0.0))


def affinity_from_arrays(
    agg_mean: np.ndarray, agg_var: np.ndarray, src_mean: np.ndarray, src_var: np.ndarray
) -> np.ndarray:
    """Batched score: -(1/L) sum_l (||dmu||^2 + ||dvar||^2). Inputs are
    [..., L, D]; returns [...]."""
    d_mu = np.square(agg_mean - src_mean).sum(axis=-1)
    d_var = np.square(agg_var - src_var).sum(axis=-1)
    score = -(d_mu + d_var).mean(axis=-1)
    return score + 0.0  # normalize -0.0


def affinity_score(agg: Sequence[LayerStats], src: SourceStats, n_layers: Optional[int] = None) -> float:
    """Score one capture's aggregated stats against the source reference."""
    n_layers = n_layers or len(agg)
    if n_layers > len(agg):
        raise ValueError(f"need {n_layers} layers, aggregate has {len(agg)}")
    terms = []
    for ls in agg[:n_layers]:
        ref = src.layer(ls.layer)
        if ref.mean.shape != ls.mean.shape:
            raise ValueError(
                f"layer {ls.layer} dimension mismatch: {ls.mean.shape} vs source {ref.mean.shape}"
            )
        terms.append(
            float(np.square(ls.mean - ref.mean).sum() + np.square(ls.var - ref.var).sum())
        )
    return -sum(terms) / n_layers + 0.0


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties by lower index (canonical order
    when rows are canonically sorted). Output sorted ascending by index."""
    if not (1 <= k <= len(scores)):
        raise ValueError(f"k={k} outside [1, {len(scores)}]")
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    return np.sort(order[:k])


def select_top_k(scores: Sequence[AffinityScore], k: int) -> list[int]:
    """Capture indices of the k largest affinity scores, canonical tie order."""
    arr = np.empty(len(scores), dtype=np.float64)
    idx = np.empty(len(scores), dtype=np.int64)
    for j, s in enumerate(scores):
        arr[j], idx[j] = s.score, s.capture_index
    if len(np.unique(idx)) != len(idx):
        raise ValueError("duplicate capture indices")
    order = np.lexsort((idx, -arr))[: _check_k(k, len(scores))]
    return sorted(int(idx[j]) for j in order)


def _check_k(k: int, n: int) -> int:
    if not (1 <= k <= n):
        raise ValueError(f"k={k} outside [1, {n}]")
    return k


def filter_rows(
    entropy: np.ndarray, parent: np.ndarray, aug_index: np.ndarray, gamma_pct: float
) -> np.ndarray:
    """Rows of the bottom-gamma% entropy subset; ties by (capture canonical
    order, aug index). Returned in rank order."""
    keep = retained_count(gamma_pct, len(entropy))
    order = np.lexsort((aug_index, parent, entropy))
    return order[:keep]


def entropy_filter(pool: Sequence[AugmentedView], gamma_pct: float) -> VoteSet:
    """The retained voter set over a pooled list of augmented views."""
    if not pool:
        raise ValueError("pool must be non-empty")
    ent = np.array([v.entropy_nats for v in pool])
    parent = np.array([v.parent for v in pool])
    aug = np.array([v.aug_index for v in pool])
    rows = filter_rows(ent, parent, aug, gamma_pct)
    probs = np.stack([pool[i].probs for i in rows])
    return VoteSet(
        members=tuple((int(parent[i]), int(aug[i])) for i in rows),
        probs=probs,
        labels=probs.argmax(axis=1),
    )


def vote_hard(labels: np.ndarray, probs: np.ndarray) -> int:
    """Plurality of argmax votes; ties by greater summed probability mass on
    the tied labels, then lowest class index."""
    counts = np.bincount(labels, minlength=probs.shape[1])
    top = counts.max()
    tied = np.flatnonzero(counts == top)
    if len(tied) == 1:
        return int(tied[0])
    mass = probs[:, tied].sum(axis=0)
    return int(tied[np.flatnonzero(mass == mass.max()).min()])


def hard_vote(fset: VoteSet) -> int:
    return vote_hard(fset.labels, fset.probs)


def marginalized_vote(fset: VoteSet) -> int:
    """argmax of the mean probability vector; ties by lowest class index."""
    return int(fset.probs.mean(axis=0).argmax())


# ---------------------------------------------------------------------------
# capture library and method decisions


@dataclass
class CaptureLibrary:
    """Everything one scene/illumination pair needs, captured exactly once.

    aug blocks are laid out per candidate: rows [base + i*N, base + (i+1)*N)
    of the (possibly scene-wide) encoded batch hold the N augmentations of
    candidate i, the first row being the untouched capture.
    """

    scene: Scene
    illum: Illumination
    candidates: list[SensorConfig]
    ranks: np.ndarray
    n_augs: int
    enc: EncodedBatch
    images: Optional[np.ndarray] = None
    row_base: int = 0

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def block(self, i: int) -> slice:
        return slice(self.row_base + i * self.n_augs, self.row_base + (i + 1) * self.n_augs)

    def capture_latency(self) -> Fraction:
        return sum((c.shutter_s for c in self.candidates), Fraction(0))


def build_scene_libraries(
    scene: Scene,
    illums: Sequence[Illumination],
    candidates: Sequence[SensorConfig],
    grid: SensorGrid,
    provider: FeatureProvider,
    params: PipelineParams,
    model: ExposureModel,
    master_seed: int,
) -> dict[str, CaptureLibrary]:
    """Capture libraries for every illumination of one scene, encoded in a
    single provider pass. Each (scene, illumination, config) is captured
    exactly once; per-illumination views share the scene-wide batch."""
    cand = sorted(candidates, key=SensorConfig.sort_key)
    if not cand:
        raise ValueError("candidate set must be non-empty")
    if not illums:
        raise ValueError("need at least one illumination")
    ranks = np.array([grid.rank(c) for c in cand], dtype=np.int64)
    n = params.n_augs
    m = len(cand)
    sid = streams.stable_id(scene.scene_id)

    libs = {}
    if provider.needs_pixels:
        side = scene.radiance.shape[0]
        # augmentation geometry is counter-split per (scene, config, aug), so
        # one index map serves every illumination of the scene; per-illum
        # banks keep the working set cache-resident
        rngs = [aug_rng(master_seed, scene, int(r)) for r in ranks]
        index = _bank_index(n, rngs, side, m)
        bank = _scratch((m * n, side, side), np.float32, tag="scene-bank")
        for illum in illums:
            images = np.empty((m, side, side), dtype=np.float32)
            for i, cfg in enumerate(cand):
                rng_cap = capture_rng(master_seed, scene, illum, int(ranks[i]))
                images[i] = capture_image(scene, illum, cfg, model, rng_cap)
            np.take(images.reshape(-1), index.reshape(-1), out=bank.reshape(-1))
            enc = provider.encode_batch(bank)
            libs[illum.level_id] = CaptureLibrary(
                scene=scene, illum=illum, candidates=cand, ranks=ranks,
                n_augs=n, enc=enc, images=images,
            )
    else:
        for illum in illums:
            keys = [(sid, int(ranks[i]), a) for i in range(m) for a in range(n)]
            enc = provider.encode_batch(None, keys=keys)
            libs[illum.level_id] = CaptureLibrary(
                scene=scene, illum=illum, candidates=cand, ranks=ranks,
                n_augs=n, enc=enc, images=None,
            )
    return libs


def build_library(
    scene: Scene,
    illum: Illumination,
    candidates: Sequence[SensorConfig],
    grid: SensorGrid,
    provider: FeatureProvider,
    params: PipelineParams,
    model: ExposureModel,
    master_seed: int,
) -> CaptureLibrary:
    return build_scene_libraries(
        scene, [illum], candidates, grid, provider, params, model, master_seed
    )[illum.level_id]


@dataclass
class MethodDecision:
    """Outcome of one method on one scene/illumination pair."""

    method: str
    label: int
    selected_ranks: tuple[int, ...]
    vote_set: Optional[VoteSet]
    affinity: Optional[tuple[float, ...]]
    shot_labels: Optional[tuple[int, ...]]
    capture_latency_s: float
    compute_latency_ms: float
    stage_seconds: dict = field(default_factory=dict)

    def accuracy_against(self, true_label: int) -> float:
        if self.shot_labels is not None:
            return float(np.mean([s == true_label for s in self.shot_labels]))
        return float(self.label == true_label)


def _modeled_compute_ms(n_encodes: int) -> float:
    return DECISION_OVERHEAD_MS + ENCODE_MS_PER_VIEW * n_encodes


def _vote_set_from_rows(lib: CaptureLibrary, rows: np.ndarray) -> VoteSet:
    """rows are batch-global; members are (candidate index, aug index)."""
    probs = lib.enc.probs[rows].astype(np.float64)
    local = rows - lib.row_base
    return VoteSet(
        members=tuple(zip((local // lib.n_augs).tolist(), (local % lib.n_augs).tolist())),
        probs=probs,
        labels=probs.argmax(axis=1),
    )


def decide_affinity(
    lib: CaptureLibrary,
    source_stats: SourceStats,
    params: PipelineParams,
    aggregation: Optional[str] = None,
    layers: Optional[Sequence[int]] = None,
    active: Optional[np.ndarray] = None,
) -> MethodDecision:
    """The full selection-then-vote decision over the library's candidates.

    active restricts the candidate set (indices into lib.candidates) so
    reduced-capture policies and capture-count sweeps reuse one library.
    """
    t0 = time.perf_counter()
    aggregation = aggregation or params.aggregation
    layers = tuple(layers) if layers is not None else tuple(range(1, params.n_layers + 1))
    check_source_compat(source_stats, lib.enc._provider, layers)
    active = np.arange(lib.n_candidates) if active is None else np.asarray(active, dtype=np.int64)
    m = len(active)
    if not (1 <= params.top_k <= m):
        raise ValueError(f"top_k={params.top_k} outside [1, {m}]")
    n = lib.n_augs

    entropy = lib.enc.entropy

    # per active candidate: most confident ceil(alpha*N) augmentations,
    # ranked by (-maxp, entropy, aug index) within each block in one sort
    n_keep = max(1, math.ceil(params.alpha * n))
    rows_act = (lib.row_base + active[:, None] * n + np.arange(n)[None, :]).ravel()
    ent_act = entropy[rows_act]
    maxp_act = lib.enc.max_prob[rows_act]
    order = np.lexsort(
        (np.tile(np.arange(n), m), ent_act, -maxp_act, np.repeat(np.arange(m), n))
    )
    conf_rows = rows_act[order.reshape(m, n)[:, :n_keep]]
    t1 = time.perf_counter()

    means, vars_ = lib.enc.layer_stats(conf_rows.ravel(), layers)
    agg_mean = means.reshape(m, n_keep, len(layers), -1).mean(axis=1)
    agg_var = vars_.reshape(m, n_keep, len(layers), -1).mean(axis=1)
    src_mean = np.stack([source_stats.layer(l).mean for l in layers])
    src_var = np.stack([source_stats.layer(l).var for l in layers])
    scores = affinity_from_arrays(agg_mean, agg_var, src_mean, src_var)
    top_local = top_k_rows(scores, params.top_k)
    top = active[top_local]
    t2 = time.perf_counter()

    pool = (lib.row_base + top[:, None] * n + np.arange(n)[None, :]).ravel()
    pool_parent = np.repeat(top, n)
    pool_aug = np.tile(np.arange(n), len(top))
    fil = filter_rows(entropy[pool], pool_parent, pool_aug, params.gamma_pct)
    rows = pool[fil]
    vote_set = _vote_set_from_rows(lib, rows)
    if aggregation == "marginalized":
        label = marginalized_vote(vote_set)
    else:
        label = hard_vote(vote_set)
    t3 = time.perf_counter()

    return MethodDecision(
        method=METHOD_MVP_MARGINAL if aggregation == "marginalized" else METHOD_MVP,
        label=label,
        selected_ranks=tuple(int(lib.ranks[i]) for i in top),
        vote_set=vote_set,
        affinity=tuple(float(s) for s in scores),
        shot_labels=None,
        capture_latency_s=float(sum((lib.candidates[int(i)].shutter_s for i in active), Fraction(0))),
        compute_latency_ms=_modeled_compute_ms(m * n),
        stage_seconds={
            "confidence": t1 - t0,
            "affinity": t2 - t1,
            "filter_vote": t3 - t2,
        },
    )


def decide_confidence(
    lib: CaptureLibrary,
    params: PipelineParams,
    vote: bool = False,
    active: Optional[np.ndarray] = None,
) -> MethodDecision:
    """Confidence-only selection: the single capture whose raw (unaugmented)
    view has the highest max probability; ties by canonical order. With
    vote=True the selected capture's own augmentations are entropy-filtered
    and hard-voted."""
    t0 = time.perf_counter()
    active = np.arange(lib.n_candidates) if active is None else np.asarray(active, dtype=np.int64)
    n = lib.n_augs
    raw_rows = lib.row_base + active * n
    probs = lib.enc.probs
    conf = lib.enc.max_prob[raw_rows]
    best_local = int(np.lexsort((active, -conf))[0])
    best = int(active[best_local])

    if vote:
        blk = lib.block(best)
        rows = filter_rows(
            lib.enc.entropy[blk],
            np.full(n, best),
            np.arange(n),
            params.gamma_pct,
        ) + blk.start
        vote_set = _vote_set_from_rows(lib, rows)
        label = hard_vote(vote_set)
    else:
        row = lib.row_base + best * n
        p = probs[row].astype(np.float64)
        vote_set = VoteSet(
            members=((best, 0),),
            probs=p[None, :],
            labels=np.array([int(p.argmax())]),
        )
        label = int(p.argmax())
    n_encodes = len(active) * n
    t1 = time.perf_counter()

    return MethodDecision(
        method=METHOD_CONFIDENCE_VOTE if vote else METHOD_CONFIDENCE,
        label=label,
        selected_ranks=(int(lib.ranks[best]),),
        vote_set=vote_set,
        affinity=None,
        shot_labels=None,
        capture_latency_s=float(sum((lib.candidates[int(i)].shutter_s for i in active), Fraction(0))),
        compute_latency_ms=_modeled_compute_ms(n_encodes),
        stage_seconds={"select_vote": t1 - t0},
    )


def ae_scene_decisions(
    scene: Scene,
    illums: Sequence[Illumination],
    grid: SensorGrid,
    provider: FeatureProvider,
    params: PipelineParams,
    model: ExposureModel,
    master_seed: int,
    variants: Sequence[bool] = (False,),
    n_shots: int = 5,
    photo_ranges: Optional[dict] = None,
) -> dict[tuple[str, bool], MethodDecision]:
    """The auto-exposure protocol: n_shots stochastic captures at the AE
    config; each shot is predicted by entropy filter + hard vote over its own
    N augmentations; accuracy averages over shots. All illuminations are
    encoded in one pass per variant; the plain and photometric runs share
    captures and geometric crops."""
    if not provider.needs_pixels:
        raise ProviderError("auto-exposure baselines need a pixel-capable provider")
    t0 = time.perf_counter()
    n = params.n_augs
    sid = streams.stable_id(scene.scene_id)
    side = scene.radiance.shape[0]
    ranges = photo_ranges or {}
    n_ill = len(illums)

    variants = tuple(dict.fromkeys(variants))
    kw = {k: ranges[k] for k in ("brightness", "contrast", "gamma") if k in ranges}
    kw.setdefault("brightness", DEFAULT_BRIGHTNESS)
    kw.setdefault("contrast", DEFAULT_CONTRAST)
    kw.setdefault("gamma", DEFAULT_GAMMA)

    # crop geometry and jitter draws are counter-split per (scene, shot):
    # shared across illuminations
    rngs = [streams.stream(master_seed, STREAM_AE_AUG, sid, shot) for shot in range(n_shots)]
    index = _bank_index(n, rngs, side, n_shots)
    draws = None
    jit_rows = None
    if any(variants) and n > 1:
        draws = np.concatenate(
            [
                streams.stream(master_seed, STREAM_AE_PHOTO, sid, shot).random((n - 1, 3))
                for shot in range(n_shots)
            ]
        )
        jit_rows = np.concatenate([np.arange(s * n + 1, (s + 1) * n) for s in range(n_shots)])
    t1 = time.perf_counter()

    out: dict[tuple[str, bool], MethodDecision] = {}
    aug_ids = np.arange(n)
    zero_parent = np.zeros(n, dtype=np.int64)
    geometric = _scratch((n_shots * n, side, side), np.float32, tag="ae-bank")
    for illum in illums:
        cfg = auto_exposure(scene, illum, grid, model)
        rank = grid.rank(cfg)
        shots = np.empty((n_shots, side, side), dtype=np.float32)
        for shot in range(n_shots):
            rng_cap = capture_rng(master_seed, scene, illum, rank, shot)
            shots[shot] = capture_image(scene, illum, cfg, model, rng_cap)
        np.take(shots.reshape(-1), index.reshape(-1), out=geometric.reshape(-1))

        for photometric in variants:
            augs = geometric
            if photometric and n > 1:
                augs = _scratch(geometric.shape, np.float32, tag="ae-photo")
                np.copyto(augs, geometric)
                augs[jit_rows] = _photometric_apply(augs[jit_rows], draws, **kw)
            enc = provider.encode_batch(augs)

            shot_labels = []
            last_vote = None
            for shot in range(n_shots):
                blk = slice(shot * n, (shot + 1) * n)
                rows = filter_rows(enc.entropy[blk], zero_parent, aug_ids, params.gamma_pct)
                probs = enc.probs[blk][rows].astype(np.float64)
                labels = probs.argmax(axis=1)
                shot_labels.append(vote_hard(labels, probs))
                if shot == n_shots - 1:
                    last_vote = VoteSet(
                        members=tuple((0, int(r)) for r in rows), probs=probs, labels=labels
                    )
            label = int(np.bincount(np.array(shot_labels), minlength=provider.n_classes).argmax())
            out[(illum.level_id, photometric)] = MethodDecision(
                method=METHOD_AE_PHOTO if photometric else METHOD_AE,
                label=label,
                selected_ranks=(rank,),
                vote_set=last_vote,
                affinity=None,
                shot_labels=tuple(shot_labels),
                capture_latency_s=float(cfg.shutter_s) * n_shots,
                compute_latency_ms=_modeled_compute_ms(n_shots * n),
                stage_seconds={"prepare": t1 - t0},
            )
    return out


def ae_decisions(
    scene: Scene,
    illum: Illumination,
    grid: SensorGrid,
    provider: FeatureProvider,
    params: PipelineParams,
    model: ExposureModel,
    master_seed: int,
    variants: Sequence[bool] = (False,),
    n_shots: int = 5,
    photo_ranges: Optional[dict] = None,
) -> dict[bool, MethodDecision]:
    per_key = ae_scene_decisions(
        scene, [illum], grid, provider, params, model, master_seed,
        variants=variants, n_shots=n_shots, photo_ranges=photo_ranges,
    )
    return {photometric: per_key[(illum.level_id, photometric)] for photometric in variants}


def decide_ae(
    scene: Scene,
    illum: Illumination,
    grid: SensorGrid,
    provider: FeatureProvider,
    params: PipelineParams,
    model: ExposureModel,
    master_seed: int,
    photometric: bool = False,
    n_shots: int = 5,
    photo_ranges: Optional[dict] = None,
) -> MethodDecision:
    return ae_decisions(
        scene, illum, grid, provider, params, model, master_seed,
        variants=(photometric,), n_shots=n_shots, photo_ranges=photo_ranges,
    )[photometric]


# ---------------------------------------------------------------------------
# one-call runners (library built on the spot)


def run_mvp(
    scene: Scene,
    illum: Illumination,
    candidates: Sequence[SensorConfig],
    provider: FeatureProvider,
    params: PipelineParams,
    *,
    grid: SensorGrid,
    source_stats: SourceStats,
    exposure_model: ExposureModel,
    master_seed: Optional[int] = None,
    aggregation: Optional[str] = None,
) -> MethodDecision:
    seed = params.seed if master_seed is None else master_seed
    lib = build_library(scene, illum, candidates, grid, provider, params, exposure_model, seed)
    return decide_affinity(lib, source_stats, params, aggregation=aggregation)


def run_confidence_only(
    scene: Scene,
    illum: Illumination,
    candidates: Sequence[SensorConfig],
    provider: FeatureProvider,
    params: PipelineParams,
    *,
    grid: SensorGrid,
    exposure_model: ExposureModel,
    master_seed: Optional[int] = None,
    vote: bool = False,
) -> MethodDecision:
    seed = params.seed if master_seed is None else master_seed
    lib = build_library(scene, illum, candidates, grid, provider, params, exposure_model, seed)
    return decide_confidence(lib, params, vote=vote)


def run_ae(
    scene: Scene,
    illum: Illumination,
    grid: SensorGrid,
    provider: FeatureProvider,
    params: PipelineParams,
    *,
    exposure_model: ExposureModel,
    master_seed: Optional[int] = None,
    photometric: bool = False,
) -> MethodDecision:
    seed = params.seed if master_seed is None else master_seed
    return decide_ae(scene, illum, grid, provider, params, exposure_model, seed, photometric=photometric)
