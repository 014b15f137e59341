"""Fingerprint extraction, normalization, and canonical serialization.

A fingerprint stores the raw per-layer standard deviation sequence of each
requested projection kind. Sequences are normalized to zero mean and unit
sample variance only at comparison time, never in the persisted artifact.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .arch_map import (
    ATTENTION_KINDS,
    LayerTensorMap,
    ModelConfig,
    NameRule,
    ProjectionKind,
    TensorRef,
    resolve_layers,
)
from .errors import (
    DegenerateLayer,
    DegenerateSequence,
    DocumentMalformed,
    HashMismatch,
    SchemaVersionUnsupported,
)
from .tensor_store import CheckpointHandle, StreamStats, merge_stats, sample_std, tensor_stats

SCHEMA_VERSION = 1

FINGERPRINT_SUFFIX = ".tpfp.json"


class MoeMode(Enum):
    """How expert FFN matrices of one layer are aggregated into one std."""

    POOLED = "pooled"
    PER_EXPERT_MEAN = "per_expert_mean"


@dataclass(frozen=True)
class StdSequence:
    kind: ProjectionKind
    values: tuple[float, ...]  # index = layer


@dataclass(frozen=True)
class NormalizedSequence:
    kind: ProjectionKind
    values: tuple[float, ...]


@dataclass(frozen=True)
class Fingerprint:
    """Per-kind raw std sequences plus extraction metadata; the persisted artifact."""

    model_id: str
    num_layers: int
    kinds: dict[ProjectionKind, StdSequence]
    extraction: dict
    content_hash: str

    @classmethod
    def from_values(
        cls, model_id: str, values_by_kind: dict[ProjectionKind, "list[float] | tuple"],
        extraction: dict | None = None,
    ) -> "Fingerprint":
        """Assemble a fingerprint from already-computed std sequences."""
        lengths = {len(v) for v in values_by_kind.values()}
        if not values_by_kind or len(lengths) != 1:
            raise DocumentMalformed("all kinds must supply one equal-length sequence")
        kinds = {
            kind: StdSequence(kind, tuple(float(x) for x in values_by_kind[kind]))
            for kind in ProjectionKind
            if kind in values_by_kind
        }
        if extraction is None:
            extraction = {
                "origin": "constructed",
                "std_convention": "sample (n-1 divisor)",
                "tool_version": __version__,
            }
        return cls(
            model_id=model_id,
            num_layers=lengths.pop(),
            kinds=kinds,
            extraction=extraction,
            content_hash=compute_content_hash(kinds),
        )


# --- canonical JSON ---------------------------------------------------------


def format_float(value: float) -> str:
    """Shortest-exact decimal form used in all machine outputs."""
    return format(value, ".17g")


def canonical_dumps(obj, indent: int | None = None) -> str:
    """Serialize to JSON with sorted keys and 17-significant-digit floats.

    Deterministic for any JSON-native structure; non-finite floats become
    null. Identical inputs always yield identical bytes.
    """
    pieces: list[str] = []
    _emit(obj, pieces, indent, 0)
    return "".join(pieces)


def _emit(obj, out: list[str], indent: int | None, level: int) -> None:
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_float(obj) if math.isfinite(obj) else "null")
    elif isinstance(obj, dict):
        if not all(isinstance(k, str) for k in obj):
            raise TypeError("canonical JSON requires string keys")
        _emit_items(
            [(json.dumps(k) + (": " if indent else ":"), obj[k]) for k in sorted(obj)],
            "{}", out, indent, level,
        )
    elif isinstance(obj, (list, tuple)):
        _emit_items([("", v) for v in obj], "[]", out, indent, level)
    else:
        raise TypeError(f"not JSON-serializable: {type(obj)!r}")


def _emit_items(items, brackets: str, out: list[str], indent: int | None, level: int) -> None:
    if not items:
        out.append(brackets)
        return
    if indent is None:
        out.append(brackets[0])
        for i, (prefix, value) in enumerate(items):
            if i:
                out.append(",")
            out.append(prefix)
            _emit(value, out, indent, level)
        out.append(brackets[1])
        return
    pad = " " * (indent * (level + 1))
    out.append(brackets[0])
    for i, (prefix, value) in enumerate(items):
        out.append(",\n" if i else "\n")
        out.append(pad)
        out.append(prefix)
        _emit(value, out, indent, level + 1)
    out.append("\n" + " " * (indent * level) + brackets[1])


def _kinds_payload(kinds: dict[ProjectionKind, StdSequence]) -> dict[str, list[float]]:
    return {kind.value: [float(v) for v in seq.values] for kind, seq in kinds.items()}


def compute_content_hash(kinds: dict[ProjectionKind, StdSequence]) -> str:
    """SHA-256 over the compact canonical serialization of the kinds map."""
    payload = canonical_dumps(_kinds_payload(kinds)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


# --- normalization ----------------------------------------------------------


def normalize_values(values) -> np.ndarray:
    """Shift to zero mean and scale to unit sample std (float64)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise DegenerateSequence(f"sequence of length {x.size} cannot be normalized")
    mean = x.mean()
    diff = x - mean
    std = math.sqrt(float(np.sum(diff * diff)) / (x.size - 1))
    if std < 1e-12:
        raise DegenerateSequence("constant sequence has no shape to compare")
    return diff / std


def normalize(seq: StdSequence | NormalizedSequence) -> NormalizedSequence:
    """Zero-mean / unit-sample-std transform of a per-layer sequence."""
    try:
        values = normalize_values(seq.values)
    except DegenerateSequence as exc:
        raise DegenerateSequence(f"kind {seq.kind.value}: {exc}") from None
    return NormalizedSequence(seq.kind, tuple(float(v) for v in values))


# --- extraction -------------------------------------------------------------


def _ref_tasks(
    layer_map: LayerTensorMap, kinds: tuple[ProjectionKind, ...], num_layers: int
) -> list[tuple[ProjectionKind, int, TensorRef]]:
    tasks = []
    for kind in kinds:
        for layer in range(num_layers):
            for ref in layer_map.refs(layer, kind):
                tasks.append((kind, layer, ref))
    return tasks


def _layer_std(stats_list: list[StreamStats], moe_mode: MoeMode, where: str) -> float:
    if moe_mode is MoeMode.PER_EXPERT_MEAN and len(stats_list) > 1:
        stds = []
        for stats in stats_list:
            if stats.count < 2:
                raise DegenerateLayer(f"{where}: expert matrix has {stats.count} element(s)")
            stds.append(sample_std(stats))
        return math.fsum(stds) / len(stds)
    pooled = StreamStats()
    for stats in stats_list:
        pooled = merge_stats(pooled, stats)
    if pooled.count < 2:
        raise DegenerateLayer(f"{where}: matrix has {pooled.count} element(s)")
    return sample_std(pooled)


def extract_fingerprint(
    ckpt: CheckpointHandle,
    cfg: ModelConfig,
    kinds=ATTENTION_KINDS,
    moe_mode: MoeMode = MoeMode.POOLED,
    rules: tuple[NameRule, ...] | None = None,
    workers: int = 1,
) -> Fingerprint:
    """Compute the per-layer std sequence of each requested projection kind.

    Expert FFN layers are pooled into one element population by default;
    PER_EXPERT_MEAN instead averages per-expert stds. Results are identical
    for any worker count: per-tensor streaming is chunk-ordered and assembly
    follows (kind, layer) order.
    """
    ordered_kinds = tuple(k for k in ProjectionKind if k in set(kinds))
    layer_map = resolve_layers(ckpt, cfg, ordered_kinds, rules)
    tasks = _ref_tasks(layer_map, ordered_kinds, cfg.num_layers)

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats = list(pool.map(lambda t: tensor_stats(ckpt, t[2].name, t[2].row_range), tasks))
    else:
        stats = [tensor_stats(ckpt, ref.name, ref.row_range) for _, _, ref in tasks]
    by_slot: dict[tuple[ProjectionKind, int], list[StreamStats]] = {}
    for (kind, layer, _), st in zip(tasks, stats):
        by_slot.setdefault((kind, layer), []).append(st)

    kinds_map: dict[ProjectionKind, StdSequence] = {}
    sources: dict[str, list[list[dict]]] = {}
    for kind in ordered_kinds:
        values = []
        kind_sources = []
        for layer in range(cfg.num_layers):
            where = f"layer {layer} kind {kind.value}"
            values.append(_layer_std(by_slot[(kind, layer)], moe_mode, where))
            kind_sources.append(
                [
                    {
                        "name": ref.name,
                        "row_range": list(ref.row_range) if ref.row_range else None,
                    }
                    for ref in layer_map.refs(layer, kind)
                ]
            )
        kinds_map[kind] = StdSequence(kind, tuple(values))
        sources[kind.value] = kind_sources

    extraction = {
        "accumulation": "float64, 8 MiB chunks, in-order merge",
        "std_convention": "sample (n-1 divisor)",
        "moe_mode": moe_mode.value,
        "tool_version": __version__,
        "sources": sources,
    }
    return Fingerprint(
        model_id=cfg.model_id,
        num_layers=cfg.num_layers,
        kinds=kinds_map,
        extraction=extraction,
        content_hash=compute_content_hash(kinds_map),
    )


# --- serialization ----------------------------------------------------------


def serialize_fingerprint(fp: Fingerprint) -> bytes:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "model_id": fp.model_id,
        "num_layers": fp.num_layers,
        "kinds": _kinds_payload(fp.kinds),
        "extraction": fp.extraction,
        "content_hash": fp.content_hash,
    }
    return (canonical_dumps(doc, indent=2) + "\n").encode("utf-8")


def deserialize_fingerprint(data: bytes) -> Fingerprint:
    """Parse and validate a fingerprint document; verifies the content hash."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DocumentMalformed(f"fingerprint document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DocumentMalformed("fingerprint document is not a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionUnsupported(
            f"schema_version {version!r} not supported (this build reads {SCHEMA_VERSION})"
        )
    model_id = doc.get("model_id")
    num_layers = doc.get("num_layers")
    raw_kinds = doc.get("kinds")
    extraction = doc.get("extraction")
    stored_hash = doc.get("content_hash")
    if (
        not isinstance(model_id, str)
        or not isinstance(num_layers, int)
        or not isinstance(raw_kinds, dict)
        or not raw_kinds
        or not isinstance(extraction, dict)
        or not isinstance(stored_hash, str)
    ):
        raise DocumentMalformed("fingerprint document is missing required fields")

    parsed: dict[ProjectionKind, StdSequence] = {}
    for kind_name in raw_kinds:
        try:
            kind = ProjectionKind(kind_name)
        except ValueError:
            raise DocumentMalformed(f"unknown projection kind {kind_name!r}") from None
        values = raw_kinds[kind_name]
        if (
            not isinstance(values, list)
            or len(values) != num_layers
            or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in values)
        ):
            raise DocumentMalformed(
                f"kind {kind_name}: values must be {num_layers} finite numbers"
            )
        parsed[kind] = StdSequence(kind, tuple(float(v) for v in values))

    kinds = {kind: parsed[kind] for kind in ProjectionKind if kind in parsed}
    recomputed = compute_content_hash(kinds)
    if recomputed != stored_hash:
        raise HashMismatch(
            f"content hash mismatch: stored {stored_hash[:12]}.., recomputed {recomputed[:12]}.."
        )
    return Fingerprint(model_id, num_layers, kinds, extraction, stored_hash)


def write_fingerprint(fp: Fingerprint, path: Path | str) -> None:
    Path(path).write_bytes(serialize_fingerprint(fp))


def read_fingerprint(path: Path | str) -> Fingerprint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DocumentMalformed(f"cannot read fingerprint file {path}: {exc}") from exc
    try:
        return deserialize_fingerprint(data)
    except (DocumentMalformed, SchemaVersionUnsupported, HashMismatch) as exc:
        raise type(exc)(f"{path}: {exc}") from None
