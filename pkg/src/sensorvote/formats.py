"""Binary file formats for precomputed embeddings and source statistics.

MVPF (embedding records):
    magic "MVPF" | u32 version=1 | u32 n_classes | u32 n_layers | u32 feat_dim
    | u64 record_count | records...
    record: u64 scene_id | u16 config_rank | u16 aug_index
            | n_layers*feat_dim f32 means | n_layers*feat_dim f32 vars
            | n_classes f32 probs
All little-endian, densely packed.

MVPS (source statistics):
    magic "MVPS" | u32 version=1 | u32 n_layers | u32 feat_dim
    | per layer: feat_dim f32 means, feat_dim f32 vars
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import LayerStats, SourceStats

MVPF_MAGIC = b"MVPF"
MVPS_MAGIC = b"MVPS"
VERSION = 1

_MVPF_HEADER = struct.Struct("<4sIIIIQ")
_MVPS_HEADER = struct.Struct("<4sIII")
_RECORD_KEY = struct.Struct("<QHH")


class FormatError(ValueError):
    """Malformed binary payload; carries the byte offset of the failure."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


@dataclass(frozen=True)
class EmbeddingTable:
    """An MVPF file pulled into memory, keyed by (scene_id, config_rank, aug_index)."""

    n_classes: int
    n_layers: int
    feat_dim: int
    keys: dict[tuple[int, int, int], int]
    means: np.ndarray  # [records, n_layers, feat_dim] f32
    vars: np.ndarray
    probs: np.ndarray  # [records, n_classes] f32

    def __len__(self) -> int:
        return len(self.keys)


def write_embeddings(
    path,
    n_classes: int,
    n_layers: int,
    feat_dim: int,
    records: Iterable[tuple[int, int, int, np.ndarray, np.ndarray, np.ndarray]],
) -> int:
    """Write records of (scene_id, config_rank, aug_index, means, vars, probs).

    means/vars are [n_layers, feat_dim]; probs is [n_classes]. Returns the
    record count.
    """
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(_MVPF_HEADER.pack(MVPF_MAGIC, VERSION, n_classes, n_layers, feat_dim, len(records)))
        for scene_id, rank, aug, means, vars_, probs in records:
            means = np.ascontiguousarray(means, dtype="<f4")
            vars_ = np.ascontiguousarray(vars_, dtype="<f4")
            probs = np.ascontiguousarray(probs, dtype="<f4")
            if means.shape != (n_layers, feat_dim) or vars_.shape != (n_layers, feat_dim):
                raise ValueError(f"record stats shape {means.shape} != ({n_layers}, {feat_dim})")
            if probs.shape != (n_classes,):
                raise ValueError(f"record probs shape {probs.shape} != ({n_classes},)")
            fh.write(_RECORD_KEY.pack(scene_id, rank, aug))
            fh.write(means.tobytes())
            fh.write(vars_.tobytes())
            fh.write(probs.tobytes())
    return len(records)


def read_embeddings(path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if len(raw) < _MVPF_HEADER.size:
        raise FormatError(len(raw), f"truncated header, need {_MVPF_HEADER.size} bytes")
    magic, version, n_classes, n_layers, feat_dim, count = _MVPF_HEADER.unpack_from(raw, 0)
    if magic != MVPF_MAGIC:
        raise FormatError(0, f"bad magic {magic!r}, expected {MVPF_MAGIC!r}")
    if version != VERSION:
        raise FormatError(4, f"unsupported version {version}, expected {VERSION}")
    if min(n_classes, n_layers, feat_dim) <= 0:
        raise FormatError(8, "header dimensions must be positive")

    stat_len = n_layers * feat_dim
    rec_size = _RECORD_KEY.size + 4 * (2 * stat_len + n_classes)
    expected = _MVPF_HEADER.size + count * rec_size
    if len(raw) != expected:
        raise FormatError(
            min(len(raw), expected),
            f"payload is {len(raw)} bytes, expected {expected} for {count} records",
        )

    keys: dict[tuple[int, int, int], int] = {}
    means = np.empty((count, n_layers, feat_dim), dtype=np.float32)
    vars_ = np.empty((count, n_layers, feat_dim), dtype=np.float32)
    probs = np.empty((count, n_classes), dtype=np.float32)
    offset = _MVPF_HEADER.size
    for i in range(count):
        scene_id, rank, aug = _RECORD_KEY.unpack_from(raw, offset)
        offset += _RECORD_KEY.size
        block = np.frombuffer(raw, dtype="<f4", count=2 * stat_len + n_classes, offset=offset)
        offset += 4 * (2 * stat_len + n_classes)
        key = (scene_id, rank, aug)
        if key in keys:
            raise FormatError(offset - rec_size, f"duplicate record key {key}")
        keys[key] = i
        means[i] = block[:stat_len].reshape(n_layers, feat_dim)
        vars_[i] = block[stat_len : 2 * stat_len].reshape(n_layers, feat_dim)
        probs[i] = block[2 * stat_len :]
    if count and float(vars_.min()) < 0.0:
        raise FormatError(_MVPF_HEADER.size, "negative variance in payload")
    return EmbeddingTable(
        n_classes=n_classes, n_layers=n_layers, feat_dim=feat_dim,
        keys=keys, means=means, vars=vars_, probs=probs,
    )


def write_source_stats(path, stats: SourceStats) -> None:
    n_layers = stats.n_layers
    feat_dim = stats.feat_dim
    with open(path, "wb") as fh:
        fh.write(_MVPS_HEADER.pack(MVPS_MAGIC, VERSION, n_layers, feat_dim))
        for ls in stats.per_layer:
            fh.write(np.ascontiguousarray(ls.mean, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ls.var, dtype="<f4").tobytes())


def read_source_stats(path, provenance: str = "") -> SourceStats:
    raw = Path(path).read_bytes()
    if len(raw) < _MVPS_HEADER.size:
        raise FormatError(len(raw), f"truncated header, need {_MVPS_HEADER.size} bytes")
    magic, version, n_layers, feat_dim = _MVPS_HEADER.unpack_from(raw, 0)
    if magic != MVPS_MAGIC:
        raise FormatError(0, f"bad magic {magic!r}, expected {MVPS_MAGIC!r}")
    if version != VERSION:
        raise FormatError(4, f"unsupported version {version}, expected {VERSION}")
    expected = _MVPS_HEADER.size + n_layers * feat_dim * 2 * 4
    if len(raw) != expected:
        raise FormatError(
            min(len(raw), expected),
            f"payload is {len(raw)} bytes, expected {expected} for {n_layers} layers",
        )
    per_layer = []
    offset = _MVPS_HEADER.size
    for layer in range(1, n_layers + 1):
        mean = np.frombuffer(raw, dtype="<f4", count=feat_dim, offset=offset).astype(np.float64)
        offset += 4 * feat_dim
        var = np.frombuffer(raw, dtype="<f4", count=feat_dim, offset=offset).astype(np.float64)
        offset += 4 * feat_dim
        if float(var.min()) < 0.0:
            raise FormatError(offset - 4 * feat_dim, f"negative variance in layer {layer}")
        per_layer.append(LayerStats(layer=layer, mean=mean, var=var))
    return SourceStats(per_layer=tuple(per_layer), provenance=provenance or str(path))
