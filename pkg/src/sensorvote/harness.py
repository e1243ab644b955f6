"""Experiment orchestration: scene sets, method matrix, ablation sweeps,
metrics, and report emission.

Reports are byte-stable for a fixed config: decision content is a pure
function of (config, seed), worker count only changes scheduling, and the
exported compute latency comes from the deterministic accounting model (wall
times are measured for diagnostics but never exported).
"""

from __future__ import annotations

import gc
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

from . import csa as csa_mod
from . import pipeline as pl
from . import provider as prov
from .camera import ExposureModel, Illumination, Scene, illumination_presets, noiseless_model
from .domain import PipelineParams, SensorGrid, SourceStats, as_shutter, default_grid
from .formats import read_source_stats, write_source_stats
from .provider import (
    EmbeddingFileProvider,
    FeatureProvider,
    SyntheticProvider,
    SyntheticProviderModel,
    build_source_stats,
)
from .synthworld import WINDOW_SHARE, SignatureSpace, ideal_image, load_scenes, make_scenes

SCHEMA_VERSION = 1

SWEEP_AXES = ("k", "gamma", "layers", "M", "csa")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending key."""


_SCHEMA: dict[str, Optional[dict]] = {
    "schema_version": None,
    "scenes": {
        "seed": None, "count": None, "classes": None, "illuminations": None,
        "path": None, "concept_noise": None, "contrast": None, "background": None,
    },
    "grid": {"iso": None, "shutter": None, "aperture": None},
    "exposure": {
        "e_opt": None, "sigma_read": None, "iso_ref": None,
        "photons_per_unit": None, "full_well": None, "noiseless": None, "seed": None,
    },
    "provider": {
        "kind": None, "path": None, "drift_gain": None, "noise_gain": None,
        "overconf_prob": None, "class_margin": None, "seed": None,
        "quality_width": None, "overconf_threshold": None, "overconf_logit": None,
        "noise_floor": None, "attractor_gain": None, "noise_bias": None,
        "stat_noise": None, "chaos_gain": None, "var_drift_frac": None,
        "n_layers": None, "feat_dim": None, "shallow_layers": None,
        "space": {"dim": None, "seed": None},
    },
    "source": {"path": None, "reference_count": None, "reference_seed": None},
    "params": {
        "n_augs": None, "alpha": None, "top_k": None, "gamma_pct": None,
        "n_layers": None, "aggregation": None, "seed": None,
    },
    "methods": {"list": None},
    "csa": {"policy": None, "m": None, "seed": None},
    "run": {"workers": None},
    "output": {"dir": None},
    "sweep": {"axis": None, "values": None},
}


def _check_unknown(data: dict, schema: dict, path: str = "") -> None:
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        sub = schema[key]
        if isinstance(sub, dict) and isinstance(value, dict):
            _check_unknown(value, sub, where)


def default_config_dict() -> dict:
    """The committed synthetic benchmark: 1000 scenes, 50 classes, six
    illuminations, overconfidence injection on, seed 42."""
    return {
        "schema_version": SCHEMA_VERSION,
        "scenes": {
            "seed": 42, "count": 1000, "classes": 50,
            "illuminations": ["L1", "L2", "L3", "L4", "L5", "L6"],
            "concept_noise": 0.1, "contrast": 5.0, "background": 0.6,
        },
        "grid": {
            "iso": [250, 2000, 16000],
            "shutter": ["1/1000", "1/60", "1/4"],
            "aperture": [5.0, 9.0, 16.0],
        },
        "exposure": {
            "e_opt": math.log(0.18), "sigma_read": 0.0008, "iso_ref": 250,
            "photons_per_unit": 20000.0, "full_well": 1.0, "noiseless": False, "seed": 0,
        },
        "provider": {
            "kind": "synthetic",
            "drift_gain": 1.0, "noise_gain": 12.0, "overconf_prob": 0.2,
            "class_margin": 16.0, "seed": 0, "quality_width": 0.8,
            "overconf_threshold": 1.2, "overconf_logit": [7.5, 10.0],
            "stat_noise": 1.5, "chaos_gain": 2.5, "var_drift_frac": 0.5,
            "n_layers": 12, "feat_dim": 64, "shallow_layers": 3,
            "space": {"dim": 16, "seed": 0},
        },
        "source": {"reference_count": 1000, "reference_seed": 0},
        "params": {
            "n_augs": 64, "alpha": 0.3, "top_k": 5, "gamma_pct": 3.0,
            "n_layers": 3, "aggregation": "hard_vote", "seed": 42,
        },
        "methods": {"list": list(pl.ALL_METHODS)},
        "run": {"workers": 1},
        "output": {"dir": "out"},
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """A fully resolved experiment: raw echoes into every report."""

    raw: dict

    def __post_init__(self):
        _check_unknown(self.raw, _SCHEMA)
        version = self.raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        try:
            self.params = PipelineParams(
                n_augs=self.raw["params"]["n_augs"],
                alpha=self.raw["params"]["alpha"],
                top_k=self.raw["params"]["top_k"],
                gamma_pct=self.raw["params"]["gamma_pct"],
                n_layers=self.raw["params"]["n_layers"],
                n_captures=self._candidate_count(),
                aggregation=self.raw["params"]["aggregation"],
                seed=self.raw["params"]["seed"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.methods = list(self.raw["methods"]["list"])
        unknown = set(self.methods) - set(pl.ALL_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; valid: {list(pl.ALL_METHODS)}")
        self.workers = int(self.raw.get("run", {}).get("workers", 1))
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")

    @classmethod
    def from_dict(cls, data: dict, defaults: Optional[dict] = None) -> "ExperimentConfig":
        return cls(raw=_merge(defaults if defaults is not None else default_config_dict(), data))

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid TOML: {exc}") from None
        return cls.from_dict(data)

    # -- builders ----------------------------------------------------------

    def grid(self) -> SensorGrid:
        g = self.raw["grid"]
        try:
            return SensorGrid(
                iso_levels=tuple(g["iso"]),
                shutter_levels=tuple(as_shutter(s) for s in g["shutter"]),
                aperture_levels=tuple(g["aperture"]),
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"grid: {exc}") from None

    def exposure_model(self) -> ExposureModel:
        e = self.raw["exposure"]
        if e.get("noiseless"):
            return noiseless_model(e_opt=e["e_opt"], iso_ref=e["iso_ref"], seed=e.get("seed", 0))
        return ExposureModel(
            e_opt=e["e_opt"], sigma_read=e["sigma_read"], iso_ref=e["iso_ref"],
            full_well=e.get("full_well", 1.0),
            photons_per_unit=e["photons_per_unit"], seed=e.get("seed", 0),
        )

    def space(self) -> SignatureSpace:
        s = self.raw["provider"]["space"]
        return SignatureSpace(
            n_classes=self.raw["scenes"]["classes"], dim=s["dim"], seed=s["seed"],
        )

    def scenes(self) -> list[Scene]:
        sc = self.raw["scenes"]
        if sc.get("path"):
            scenes = load_scenes(sc["path"])
            bad = [s.scene_id for s in scenes if not (0 <= s.true_label < sc["classes"])]
            if bad:
                raise ConfigError(f"scene file labels outside [0, {sc['classes']}): ids {bad[:5]}")
            return scenes
        return make_scenes(
            self.space(), sc["count"], sc["seed"],
            concept_noise=sc["concept_noise"], contrast=sc["contrast"],
            background=sc.get("background", 0.0),
        )

    def illuminations(self) -> list[Illumination]:
        spec = self.raw["scenes"]["illuminations"]
        presets = {ill.level_id: ill for ill in illumination_presets(self.grid(), self.exposure_model())}
        out = []
        for item in spec:
            if isinstance(item, str):
                if item not in presets:
                    raise ConfigError(f"unknown illumination preset {item!r}; have {sorted(presets)}")
                out.append(presets[item])
            else:
                out.append(Illumination(level_id=f"lux{item:g}", lux_scale=float(item)))
        if not out:
            raise ConfigError("scenes.illuminations must be non-empty")
        return out

    def provider_model(self) -> SyntheticProviderModel:
        p = dict(self.raw["provider"])
        p.pop("kind", None)
        p.pop("path", None)
        p.pop("space", None)
        p["overconf_logit"] = tuple(p["overconf_logit"])
        try:
            return SyntheticProviderModel(**p)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"provider: {exc}") from None

    def provider(self) -> FeatureProvider:
        kind = self.raw["provider"]["kind"]
        if kind == "synthetic":
            contrast = self.raw["scenes"]["contrast"]
            if self.raw["scenes"].get("background", 0.0) > 0:
                contrast *= WINDOW_SHARE
            return SyntheticProvider(
                self.space(), self.provider_model(), self.exposure_model().e_opt,
                pattern_scale=contrast,
            )
        if kind == "file":
            path = self.raw["provider"].get("path")
            if not path:
                raise ConfigError("provider.kind = 'file' requires provider.path")
            return EmbeddingFileProvider(path)
        raise ConfigError(f"unknown provider.kind {kind!r}")

    def source_stats(self, provider: FeatureProvider) -> SourceStats:
        src = self.raw.get("source", {})
        if src.get("path"):
            stats = read_source_stats(src["path"])
        else:
            stats = reference_source_stats(
                provider, self.space(),
                n_ref=src.get("reference_count", 1000),
                seed=src.get("reference_seed", 0),
                e_opt=self.exposure_model().e_opt,
            )
        prov.check_source_compat(stats, provider, range(1, self.params.n_layers + 1))
        return stats

    def csa_policy(self) -> Optional[csa_mod.CsaPolicy]:
        spec = self.raw.get("csa")
        if not spec or spec.get("policy") in (None, "none"):
            return None
        try:
            return csa_mod.CsaPolicy(variant=spec["policy"], m=spec["m"], seed=spec.get("seed", 0))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"csa: {exc}") from None

    def _candidate_count(self) -> int:
        spec = self.raw.get("csa")
        if spec and spec.get("policy") not in (None, "none"):
            return int(spec["m"])
        g = self.raw["grid"]
        return len(g["iso"]) * len(g["shutter"]) * len(g["aperture"])

    def resolved(self) -> dict:
        """JSON-safe echo of every effective setting."""
        return json.loads(json.dumps(self.raw, default=str, sort_keys=True))


def reference_source_stats(
    provider: FeatureProvider, space: SignatureSpace, n_ref: int = 1000, seed: int = 0,
    e_opt: float = math.log(0.18),
) -> SourceStats:
    """Source statistics from perfectly exposed, noiseless captures of a
    reference scene set (the stand-in for the encoder's pre-training domain)."""
    if not provider.needs_pixels:
        raise ConfigError("source.path is required for a file-backed provider")
    scenes = make_scenes(space, n_ref, seed)
    views = [ideal_image(s, e_opt) for s in scenes]
    return build_source_stats(
        provider, views, n_layers=provider.n_layers,
        provenance=f"reference:{n_ref}@seed{seed}",
    )


# ---------------------------------------------------------------------------
# benchmark execution


@dataclass
class ExperimentReport:
    config: dict
    rows: list[dict]
    decisions: list[dict]
    meta: dict = field(default_factory=dict)

    def row(self, method: str, illumination: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["illumination"] == illumination:
                return r
        raise KeyError((method, illumination))

    def method_accuracy(self, method: str) -> float:
        num = sum(r["acc_num"] for r in self.rows if r["method"] == method)
        den = sum(r["acc_den"] for r in self.rows if r["method"] == method)
        return num / den if den else 0.0

    def method_counts(self, method: str) -> tuple[int, int]:
        num = sum(r["acc_num"] for r in self.rows if r["method"] == method)
        den = sum(r["acc_den"] for r in self.rows if r["method"] == method)
        return int(num), int(den)

    def to_dict(self) -> dict:
        return {"config": self.config, "rows": self.rows, "decisions": self.decisions, "meta": self.meta}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        return cls(
            config=data["config"], rows=data["rows"],
            decisions=data["decisions"], meta=data.get("meta", {}),
        )


def _decision_record(decision: pl.MethodDecision, lib_ranks: Optional[np.ndarray], scene: Scene,
                     illum: Illumination) -> dict:
    members = None
    if decision.vote_set is not None:
        if lib_ranks is not None:
            members = [[int(lib_ranks[i]), int(a)] for i, a in decision.vote_set.members]
        else:
            members = [[int(i), int(a)] for i, a in decision.vote_set.members]
    rec = {
        "method": decision.method,
        "illumination": illum.level_id,
        "scene_id": scene.scene_id,
        "true_label": scene.true_label,
        "predicted": decision.label,
        "selected_ranks": list(decision.selected_ranks),
        "members": members,
        "affinity": list(decision.affinity) if decision.affinity is not None else None,
        "shot_labels": list(decision.shot_labels) if decision.shot_labels is not None else None,
        "capture_latency_s": decision.capture_latency_s,
        "compute_latency_ms": decision.compute_latency_ms,
    }
    if decision.shot_labels is not None:
        rec["acc_num"] = sum(1 for s in decision.shot_labels if s == scene.true_label)
        rec["acc_den"] = len(decision.shot_labels)
    else:
        rec["acc_num"] = int(decision.label == scene.true_label)
        rec["acc_den"] = 1
    return rec


def _affinity_pair(lib, source_stats, params, layers=None, active=None):
    """Hard-vote and marginalized decisions off one shared selection pass."""
    base = pl.decide_affinity(lib, source_stats, params, aggregation="hard_vote",
                              layers=layers, active=active)
    marginal_label = pl.marginalized_vote(base.vote_set)
    marginal = pl.MethodDecision(
        method=pl.METHOD_MVP_MARGINAL,
        label=marginal_label,
        selected_ranks=base.selected_ranks,
        vote_set=base.vote_set,
        affinity=base.affinity,
        shot_labels=None,
        capture_latency_s=base.capture_latency_s,
        compute_latency_ms=base.compute_latency_ms,
        stage_seconds=dict(base.stage_seconds),
    )
    return base, marginal


def evaluate_scene(
    scene: Scene,
    illums: Sequence[Illumination],
    methods: Sequence[str],
    grid: SensorGrid,
    candidates,
    provider: FeatureProvider,
    source_stats: Optional[SourceStats],
    params: PipelineParams,
    model: ExposureModel,
) -> list[dict]:
    records = []
    grid_methods = [m for m in methods if m not in (pl.METHOD_AE, pl.METHOD_AE_PHOTO)]
    ae_methods = [m for m in methods if m in (pl.METHOD_AE, pl.METHOD_AE_PHOTO)]
    libs = (
        pl.build_scene_libraries(scene, illums, candidates, grid, provider, params, model, params.seed)
        if grid_methods
        else {}
    )
    ae_all = (
        pl.ae_scene_decisions(
            scene, illums, grid, provider, params, model, params.seed,
            variants=tuple(m == pl.METHOD_AE_PHOTO for m in ae_methods),
        )
        if ae_methods
        else {}
    )
    for illum in illums:
        if grid_methods:
            lib = libs[illum.level_id]
            pair = None
            for method in methods:
                if method == pl.METHOD_MVP or method == pl.METHOD_MVP_MARGINAL:
                    if pair is None:
                        pair = _affinity_pair(lib, source_stats, params)
                    decision = pair[0] if method == pl.METHOD_MVP else pair[1]
                elif method == pl.METHOD_CONFIDENCE:
                    decision = pl.decide_confidence(lib, params, vote=False)
                elif method == pl.METHOD_CONFIDENCE_VOTE:
                    decision = pl.decide_confidence(lib, params, vote=True)
                else:
                    continue
                records.append(_decision_record(decision, lib.ranks, scene, illum))
        for method in ae_methods:
            decision = ae_all[(illum.level_id, method == pl.METHOD_AE_PHOTO)]
            records.append(_decision_record(decision, None, scene, illum))
    return records


def _map_scenes(fn: Callable, scenes: Sequence[Scene], workers: int) -> list:
    # the hot loop allocates heavily but creates no cycles; pausing the
    # collector buys a measurable chunk of the runtime budget
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        if workers <= 1:
            return [fn(s) for s in scenes]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, scenes))
    finally:
        if was_enabled:
            gc.enable()


def _aggregate_rows(
    decisions: list[dict], methods: Sequence[str], illums: Sequence[Illumination], seed: int
) -> list[dict]:
    totals: dict[tuple[str, str], dict] = {}
    for rec in decisions:
        key = (rec["method"], rec["illumination"])
        agg = totals.setdefault(
            key, {"acc_num": 0, "acc_den": 0, "capture": 0.0, "compute": 0.0, "n": 0}
        )
        agg["acc_num"] += rec["acc_num"]
        agg["acc_den"] += rec["acc_den"]
        agg["capture"] += rec["capture_latency_s"]
        agg["compute"] += rec["compute_latency_ms"]
        agg["n"] += 1
    rows = []
    for method in methods:
        for illum in illums:
            agg = totals.get((method, illum.level_id))
            if agg is None:
                continue
            rows.append({
                "method": method,
                "illumination": illum.level_id,
                "accuracy": agg["acc_num"] / agg["acc_den"] if agg["acc_den"] else 0.0,
                "acc_num": agg["acc_num"],
                "acc_den": agg["acc_den"],
                "capture_latency_s": agg["capture"] / agg["n"],
                "compute_latency_ms": agg["compute"] / agg["n"],
                "seed": seed,
            })
    return rows


def run_benchmark(cfg: ExperimentConfig) -> ExperimentReport:
    grid = cfg.grid()
    model = cfg.exposure_model()
    provider = cfg.provider()
    scenes = cfg.scenes()
    illums = cfg.illuminations()
    policy = cfg.csa_policy()
    candidates = csa_mod.select_candidates(grid, policy, master_seed=cfg.params.seed)
    params = cfg.params

    ae_requested = set(cfg.methods) & {pl.METHOD_AE, pl.METHOD_AE_PHOTO}
    if ae_requested and not provider.needs_pixels:
        raise ConfigError(
            f"methods {sorted(ae_requested)} need a pixel-capable provider, not provider.kind='file'"
        )
    needs_source = set(cfg.methods) & {pl.METHOD_MVP, pl.METHOD_MVP_MARGINAL}
    source_stats = cfg.source_stats(provider) if needs_source else None

    def eval_one(scene: Scene) -> list[dict]:
        return evaluate_scene(
            scene, illums, cfg.methods, grid, candidates, provider, source_stats, params, model
        )

    per_scene = _map_scenes(eval_one, scenes, cfg.workers)
    decisions = [rec for group in per_scene for rec in group]
    rows = _aggregate_rows(decisions, cfg.methods, illums, params.seed)
    meta = {
        "ae_policy": "nearest-target-exposure stand-in (the physical camera's algorithm is not modeled)",
        "compute_latency": "modeled per encoder pass, not measured",
        "candidates": [c.label() for c in candidates],
        "csa": None if policy is None else {"policy": policy.variant, "m": policy.m, "seed": policy.seed},
    }
    return ExperimentReport(config=cfg.resolved(), rows=rows, decisions=decisions, meta=meta)


def replay_decision(cfg: ExperimentConfig, method: str, scene_id: int, illumination: str) -> dict:
    """Recompute one logged decision from (config, seed) alone."""
    grid = cfg.grid()
    model = cfg.exposure_model()
    provider = cfg.provider()
    scene = next(s for s in cfg.scenes() if s.scene_id == scene_id)
    illum = next(i for i in cfg.illuminations() if i.level_id == illumination)
    candidates = csa_mod.select_candidates(grid, cfg.csa_policy(), master_seed=cfg.params.seed)
    source_stats = cfg.source_stats(provider) if method in (pl.METHOD_MVP, pl.METHOD_MVP_MARGINAL) else None
    records = evaluate_scene(
        scene, [illum], [method], grid, candidates, provider, source_stats, cfg.params, model
    )
    return records[0]


# ---------------------------------------------------------------------------
# ablation sweeps


def _parse_layer_spec(value) -> tuple[int, ...]:
    """Layer axis values: 3 -> (1,2,3); "10-12" -> (10,11,12); [1,5] -> (1,5)."""
    if isinstance(value, int):
        if value < 1:
            raise ConfigError(f"layer count must be >= 1, got {value}")
        return tuple(range(1, value + 1))
    if isinstance(value, str):
        parts = value.split("-")
        if len(parts) == 1:
            return (int(parts[0]),)
        if len(parts) == 2:
            lo, hi = int(parts[0]), int(parts[1])
            if lo > hi:
                raise ConfigError(f"bad layer range {value!r}")
            return tuple(range(lo, hi + 1))
        raise ConfigError(f"bad layer spec {value!r}")
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    raise ConfigError(f"bad layer spec {value!r}")


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence) -> list[dict]:
    """One benchmark row per value, every other parameter at the config's
    defaults. Captures and encodings are computed once per scene and shared
    across all values."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")

    grid = cfg.grid()
    model = cfg.exposure_model()
    provider = cfg.provider()
    scenes = cfg.scenes()
    illums = cfg.illuminations()
    params = cfg.params
    source_stats = cfg.source_stats(provider)
    base_policy = cfg.csa_policy()

    # resolve per-value candidate subsets and decision kwargs up front
    if axis in ("k", "gamma", "layers"):
        candidates = csa_mod.select_candidates(grid, base_policy, master_seed=params.seed)
        actives = {v: None for v in values}
    elif axis == "M":
        variant = base_policy.variant if base_policy else "csa1"
        seed = base_policy.seed if base_policy else 0
        candidates = grid.configs()
        actives = {}
        for v in values:
            sel = csa_mod.select_candidates(grid, csa_mod.CsaPolicy(variant, int(v), seed), params.seed)
            actives[v] = np.array([grid.rank(c) for c in sel])
    else:  # csa axis
        m = base_policy.m if base_policy else grid.size
        seed = base_policy.seed if base_policy else 0
        candidates = grid.configs()
        actives = {}
        for v in values:
            if v == "none":
                actives[v] = np.arange(grid.size)
            else:
                sel = csa_mod.select_candidates(grid, csa_mod.CsaPolicy(str(v), m, seed), params.seed)
                actives[v] = np.array([grid.rank(c) for c in sel])

    def variant_args(value) -> dict:
        if axis == "k":
            if not (1 <= int(value) <= len(candidates)):
                raise ConfigError(f"k={value} outside [1, {len(candidates)}]")
            return {"params": _with(params, top_k=int(value))}
        if axis == "gamma":
            if not (0 < float(value) <= 100):
                raise ConfigError(f"gamma={value} outside (0, 100]")
            return {"params": _with(params, gamma_pct=float(value))}
        if axis == "layers":
            layers = _parse_layer_spec(value)
            if max(layers) > provider.n_layers:
                raise ConfigError(f"layer {max(layers)} beyond provider depth {provider.n_layers}")
            return {"params": params, "layers": layers}
        active = actives[value]
        if not (1 <= params.top_k <= len(active)):
            raise ConfigError(f"{axis}={value} leaves {len(active)} candidates, fewer than top_k={params.top_k}")
        return {"params": params, "active_ranks": active}

    arg_table = {v: variant_args(v) for v in values}
    rank_of = {grid.rank(c): i for i, c in enumerate(candidates)}

    def eval_one(scene: Scene) -> list[tuple]:
        out = []
        libs = pl.build_scene_libraries(
            scene, illums, candidates, grid, provider, params, model, params.seed
        )
        for illum in illums:
            lib = libs[illum.level_id]
            for v in values:
                args = arg_table[v]
                active = None
                if "active_ranks" in args:
                    active = np.array([rank_of[int(r)] for r in args["active_ranks"]])
                decision = pl.decide_affinity(
                    lib, source_stats, args["params"],
                    layers=args.get("layers"), active=active,
                )
                out.append((v, illum.level_id, _decision_record(decision, lib.ranks, scene, illum)))
        return out

    results = _map_scenes(eval_one, scenes, cfg.workers)
    rows = []
    for v in values:
        recs = [rec for group in results for (val, _ill, rec) in group if val == v]
        num = sum(r["acc_num"] for r in recs)
        den = sum(r["acc_den"] for r in recs)
        rows.append({
            "axis": axis,
            "value": v if isinstance(v, (int, float, str)) else str(v),
            "accuracy": num / den if den else 0.0,
            "acc_num": num,
            "acc_den": den,
            "capture_latency_s": sum(r["capture_latency_s"] for r in recs) / len(recs) if recs else 0.0,
            "compute_latency_ms": sum(r["compute_latency_ms"] for r in recs) / len(recs) if recs else 0.0,
            "seed": params.seed,
        })
    return rows


def _with(params: PipelineParams, **kw) -> PipelineParams:
    base = {
        "n_augs": params.n_augs, "alpha": params.alpha, "top_k": params.top_k,
        "gamma_pct": params.gamma_pct, "n_layers": params.n_layers,
        "n_captures": params.n_captures, "aggregation": params.aggregation, "seed": params.seed,
    }
    base.update(kw)
    try:
        return PipelineParams(**base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# report export


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_report(report: ExperimentReport, fmt: str, path) -> Path:
    """Write the report; CSV for the aggregate rows, JSON for everything.
    Byte-stable for fixed inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        lines = ["method,illumination,accuracy,capture_latency_s,compute_latency_ms,seed"]
        for r in report.rows:
            lines.append(
                ",".join(
                    _fmt(r[k])
                    for k in ("method", "illumination", "accuracy", "capture_latency_s",
                              "compute_latency_ms", "seed")
                )
            )
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "json":
        path.write_text(json.dumps(report.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    else:
        raise ConfigError(f"unknown export format {fmt!r}; expected csv or json")
    return path


def export_sweep(rows: list[dict], fmt: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        lines = ["axis,value,accuracy,capture_latency_s,compute_latency_ms,seed"]
        for r in rows:
            lines.append(
                ",".join(
                    _fmt(r[k])
                    for k in ("axis", "value", "accuracy", "capture_latency_s",
                              "compute_latency_ms", "seed")
                )
            )
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "json":
        path.write_text(json.dumps(rows, sort_keys=True, separators=(",", ":")) + "\n")
    else:
        raise ConfigError(f"unknown export format {fmt!r}; expected csv or json")
    return path


# ---------------------------------------------------------------------------
# embedding export (file-backed provider path, end to end)


def export_embeddings(cfg: ExperimentConfig, path) -> int:
    """Run the synthetic capture/augment/encode front end for the benchmark's
    grid keyspace and persist every record, so a file-backed run can replace
    the synthetic provider."""
    provider = cfg.provider()
    if not provider.needs_pixels:
        raise ConfigError("export-embeddings needs a synthetic provider to export from")
    grid = cfg.grid()
    model = cfg.exposure_model()
    scenes = cfg.scenes()
    illums = cfg.illuminations()
    if len(illums) != 1:
        raise ConfigError(
            "embedding export covers one illumination per file; set scenes.illuminations to a single level"
        )
    candidates = csa_mod.select_candidates(grid, cfg.csa_policy(), master_seed=cfg.params.seed)
    params = cfg.params
    layers = tuple(range(1, provider.n_layers + 1))

    records = []
    for scene in scenes:
        lib = pl.build_library(scene, illums[0], candidates, grid, provider, params, model, params.seed)
        means, vars_ = lib.enc.layer_stats(np.arange(len(lib.enc)), layers)
        for i in range(lib.n_candidates):
            for a in range(params.n_augs):
                row = i * params.n_augs + a
                records.append((
                    scene.scene_id, int(lib.ranks[i]), a,
                    means[row], vars_[row], lib.enc.probs[row],
                ))
    from .formats import write_embeddings

    return write_embeddings(path, provider.n_classes, provider.n_layers, provider.feat_dim, records)


def export_source_stats(cfg: ExperimentConfig, path) -> SourceStats:
    provider = cfg.provider()
    stats = cfg.source_stats(provider)
    write_source_stats(path, stats)
    return stats
