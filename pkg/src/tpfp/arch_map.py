"""Model-config loading and tensor-name resolution to per-layer projections.

Resolution is driven by an ordered rule table of name patterns with
``{layer}`` and ``{expert}`` placeholders. The built-in table covers the
common open-weight naming families (separate q/k/v/o projections, fused
query-key-value tensors split by row ranges, and expert FFN tensors with an
optional shared expert); a user-supplied JSON mapping file replaces it for
anything else.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import (
    AmbiguousPattern,
    ConfigFieldMissing,
    ConfigMissing,
    MappingFileInvalid,
    ShapeContradiction,
    UnresolvedLayer,
)
from .tensor_store import CheckpointHandle


class ProjectionKind(Enum):
    Q = "Q"
    K = "K"
    V = "V"
    O = "O"
    GATE = "GATE"
    UP = "UP"
    DOWN = "DOWN"


ATTENTION_KINDS = (ProjectionKind.Q, ProjectionKind.K, ProjectionKind.V, ProjectionKind.O)
FFN_KINDS = (ProjectionKind.GATE, ProjectionKind.UP, ProjectionKind.DOWN)


@dataclass(frozen=True)
class ModelConfig:
    model_id: str
    num_layers: int
    hidden_size: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    num_experts: int = 0
    architecture_tag: str = ""


@dataclass(frozen=True)
class TensorRef:
    """One resolved tensor, optionally restricted to a row slice of a fused tensor."""

    name: str
    row_range: tuple[int, int] | None = None
    expert: int | None = None


@dataclass(frozen=True)
class LayerTensorMap:
    """Assignment of (layer, projection kind) to the tensors that realize it."""

    entries: dict[tuple[int, ProjectionKind], tuple[TensorRef, ...]]

    def refs(self, layer: int, kind: ProjectionKind) -> tuple[TensorRef, ...]:
        return self.entries[(layer, kind)]


@dataclass(frozen=True)
class NameRule:
    """One pattern of the resolution table.

    kind is a projection kind name, or "QKV" for a fused tensor that is split
    into row ranges following fused_order.
    """

    pattern: str
    kind: str
    fused_order: tuple[str, ...] | None = None


BUILTIN_RULES: tuple[NameRule, ...] = (
    # separate attention projections (Llama / Qwen / Mistral / OLMo style)
    NameRule("model.layers.{layer}.self_attn.q_proj.weight", "Q"),
    NameRule("model.layers.{layer}.self_attn.k_proj.weight", "K"),
    NameRule("model.layers.{layer}.self_attn.v_proj.weight", "V"),
    NameRule("model.layers.{layer}.self_attn.o_proj.weight", "O"),
    # fused attention projections
    NameRule("model.layers.{layer}.self_attn.qkv_proj.weight", "QKV", ("Q", "K", "V")),
    NameRule("model.layers.{layer}.attention.query_key_value.weight", "QKV", ("Q", "K", "V")),
    # dense FFN
    NameRule("model.layers.{layer}.mlp.gate_proj.weight", "GATE"),
    NameRule("model.layers.{layer}.mlp.up_proj.weight", "UP"),
    NameRule("model.layers.{layer}.mlp.down_proj.weight", "DOWN"),
    # expert FFN (Qwen-MoE / OLMoE style), plus the optional shared expert
    NameRule("model.layers.{layer}.mlp.experts.{expert}.gate_proj.weight", "GATE"),
    NameRule("model.layers.{layer}.mlp.experts.{expert}.up_proj.weight", "UP"),
    NameRule("model.layers.{layer}.mlp.experts.{expert}.down_proj.weight", "DOWN"),
    NameRule("model.layers.{layer}.mlp.shared_expert.gate_proj.weight", "GATE"),
    NameRule("model.layers.{layer}.mlp.shared_expert.up_proj.weight", "UP"),
    NameRule("model.layers.{layer}.mlp.shared_expert.down_proj.weight", "DOWN"),
)

_KIND_NAMES = {k.value for k in ProjectionKind}

_LAYER_NAME_RE = re.compile(r"(?:^|\.)(?:layers|h|blocks)\.(\d+)\.")


def _rule_regex(pattern: str) -> re.Pattern[str]:
    escaped = re.escape(pattern)
    escaped = escaped.replace(re.escape("{layer}"), r"(?P<layer>\d+)")
    escaped = escaped.replace(re.escape("{expert}"), r"(?P<expert>\d+)")
    return re.compile("^" + escaped + "$")


def load_mapping_rules(path: Path | str) -> tuple[NameRule, ...]:
    """Load a user mapping file: a JSON list of {pattern, kind, fused_order?}."""
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MappingFileInvalid(f"{path}: unreadable mapping file: {exc}") from exc
    if not isinstance(doc, list):
        raise MappingFileInvalid(f"{path}: mapping file must be a JSON list of rules")
    rules = []
    for i, raw in enumerate(doc):
        if not isinstance(raw, dict) or not isinstance(raw.get("pattern"), str):
            raise MappingFileInvalid(f"{path}: rule {i} must be an object with a pattern")
        kind = raw.get("kind")
        fused_order = raw.get("fused_order")
        if kind == "QKV":
            order = tuple(fused_order) if fused_order is not None else ("Q", "K", "V")
            if sorted(order) != ["K", "Q", "V"]:
                raise MappingFileInvalid(
                    f"{path}: rule {i}: fused_order must be a permutation of Q, K, V"
                )
            rules.append(NameRule(raw["pattern"], "QKV", order))
        elif kind in _KIND_NAMES:
            if fused_order is not None:
                raise MappingFileInvalid(f"{path}: rule {i}: fused_order only applies to QKV")
            rules.append(NameRule(raw["pattern"], kind))
        else:
            raise MappingFileInvalid(f"{path}: rule {i}: unknown kind {kind!r}")
    if not rules:
        raise MappingFileInvalid(f"{path}: mapping file contains no rules")
    return tuple(rules)


# --- config loading ---------------------------------------------------------


def _first_int(doc: dict, keys: tuple[str, ...]) -> int | None:
    for key in keys:
        value = doc.get(key)
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    return None


def infer_layer_count(names) -> int | None:
    """Largest layer index seen in tensor names, plus one; None if none match."""
    best = -1
    for name in names:
        m = _LAYER_NAME_RE.search(name)
        if m:
            best = max(best, int(m.group(1)))
    return best + 1 if best >= 0 else None


def load_config(
    ckpt_dir: Path | str, ckpt: CheckpointHandle | None = None
) -> ModelConfig:
    """Read config.json from a checkpoint directory.

    head_dim defaults to hidden_size / num_heads and num_kv_heads defaults to
    num_heads. A missing layer count is inferred from tensor names (with a
    warning) when a checkpoint handle is supplied.
    """
    cfg_path = Path(ckpt_dir) / "config.json"
    if not cfg_path.is_file():
        raise ConfigMissing(f"no config.json in {ckpt_dir}")
    try:
        doc = json.loads(cfg_path.read_text("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigMissing(f"{cfg_path}: unparseable config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigMissing(f"{cfg_path}: config is not a JSON object")

    num_layers = _first_int(doc, ("num_hidden_layers", "num_layers", "n_layer", "n_layers"))
    if num_layers is None and ckpt is not None:
        num_layers = infer_layer_count(ckpt.tensors)
        if num_layers:
            warnings.warn(
                f"{cfg_path}: no layer count in config; inferred {num_layers} from tensor names",
                stacklevel=2,
            )
    if not num_layers or num_layers <= 0:
        raise ConfigFieldMissing(f"{cfg_path}: no layer count present or derivable")

    num_heads = _first_int(doc, ("num_attention_heads", "num_heads", "n_head"))
    if not num_heads or num_heads <= 0:
        raise ConfigFieldMissing(f"{cfg_path}: no attention head count present")

    head_dim = _first_int(doc, ("head_dim",))
    hidden = _first_int(doc, ("hidden_size", "n_embd", "d_model"))
    if hidden is None and head_dim is not None:
        hidden = num_heads * head_dim
    if not hidden or hidden <= 0:
        raise ConfigFieldMissing(f"{cfg_path}: no hidden size present or derivable")
    if head_dim is None:
        if hidden % num_heads:
            raise ConfigFieldMissing(
                f"{cfg_path}: head_dim absent and hidden_size {hidden} "
                f"not divisible by num_heads {num_heads}"
            )
        head_dim = hidden // num_heads

    num_kv_heads = _first_int(doc, ("num_key_value_heads", "num_kv_heads"))
    if num_kv_heads is None:
        num_kv_heads = num_heads
    if num_kv_heads <= 0 or num_heads % num_kv_heads:
        raise ConfigFieldMissing(
            f"{cfg_path}: num_kv_heads {num_kv_heads} must divide num_heads {num_heads}"
        )

    num_experts = _first_int(
        doc, ("num_experts", "num_local_experts", "n_routed_experts", "num_routed_experts")
    )
    if num_experts is None or num_experts < 0:
        num_experts = 0

    model_id = doc.get("model_id") or doc.get("_name_or_path") or Path(ckpt_dir).name
    tag = doc.get("model_type") or ""
    if not tag and isinstance(doc.get("architectures"), list) and doc["architectures"]:
        tag = str(doc["architectures"][0])

    return ModelConfig(
        model_id=str(model_id),
        num_layers=num_layers,
        hidden_size=hidden,
        num_heads=num_heads,
        num_kv_heads=num_kv_heads,
        head_dim=head_dim,
        num_experts=num_experts,
        architecture_tag=str(tag),
    )


# --- resolution -------------------------------------------------------------


def _fused_spans(cfg: ModelConfig, order: tuple[str, ...]) -> list[tuple[str, tuple[int, int]]]:
    sizes = {
        "Q": cfg.num_heads * cfg.head_dim,
        "K": cfg.num_kv_heads * cfg.head_dim,
        "V": cfg.num_kv_heads * cfg.head_dim,
    }
    spans = []
    offset = 0
    for kind_name in order:
        spans.append((kind_name, (offset, offset + sizes[kind_name])))
        offset += sizes[kind_name]
    return spans


def _check_attention_shape(
    cfg: ModelConfig, kind: ProjectionKind, name: str, shape: tuple[int, ...]
) -> None:
    rows = shape[0]
    if kind is ProjectionKind.Q and rows != cfg.num_heads * cfg.head_dim:
        raise ShapeContradiction(
            f"{name!r}: {rows} rows but config implies "
            f"{cfg.num_heads} heads x {cfg.head_dim} = {cfg.num_heads * cfg.head_dim}"
        )
    if kind in (ProjectionKind.K, ProjectionKind.V) and rows != cfg.num_kv_heads * cfg.head_dim:
        raise ShapeContradiction(
            f"{name!r}: {rows} rows but config implies "
            f"{cfg.num_kv_heads} kv heads x {cfg.head_dim} = {cfg.num_kv_heads * cfg.head_dim}"
        )


def resolve_layers(
    ckpt: CheckpointHandle,
    cfg: ModelConfig,
    kinds,
    rules: tuple[NameRule, ...] | None = None,
) -> LayerTensorMap:
    """Resolve checkpoint tensor names into a (layer, kind) -> tensors map.

    Pure function of the tensor name set, shapes, and config. Fails if any
    requested kind is unresolved for any layer, if two rules claim one
    tensor, or if a resolved shape contradicts the config.
    """
    requested = frozenset(kinds)
    if not requested:
        raise ValueError("kinds must be non-empty")
    table = tuple(rules) if rules is not None else BUILTIN_RULES
    compiled = [(rule, _rule_regex(rule.pattern)) for rule in table]

    collected: dict[tuple[int, ProjectionKind], list[TensorRef]] = {}
    for name, handle in ckpt.tensors.items():
        hits = [(rule, m) for rule, rx in compiled if (m := rx.match(name))]
        if not hits:
            continue
        if len(hits) > 1:
            patterns = [rule.pattern for rule, _ in hits]
            raise AmbiguousPattern(f"tensor {name!r} matches multiple rules: {patterns}")
        rule, m = hits[0]
        layer = int(m.group("layer"))
        expert = int(m.group("expert")) if "expert" in m.groupdict() else None
        if layer >= cfg.num_layers:
            raise ShapeContradiction(
                f"{name!r} implies layer {layer} but config declares {cfg.num_layers} layers"
            )
        if len(handle.shape) != 2:
            raise ShapeContradiction(
                f"{name!r} matched rule {rule.pattern!r} but is not 2-D "
                f"(shape {list(handle.shape)}); vectors are never fingerprinted"
            )
        if rule.kind == "QKV":
            spans = _fused_spans(cfg, rule.fused_order or ("Q", "K", "V"))
            total = spans[-1][1][1]
            if handle.shape[0] != total:
                raise ShapeContradiction(
                    f"{name!r}: fused tensor has {handle.shape[0]} rows, "
                    f"config implies {total}"
                )
            for kind_name, span in spans:
                kind = ProjectionKind(kind_name)
                if kind in requested:
                    collected.setdefault((layer, kind), []).append(
                        TensorRef(name, span, expert)
                    )
        else:
            kind = ProjectionKind(rule.kind)
            if kind not in requested:
                continue
            if kind in ATTENTION_KINDS[:3]:
                _check_attention_shape(cfg, kind, name, handle.shape)
            collected.setdefault((layer, kind), []).append(TensorRef(name, None, expert))

    entries: dict[tuple[int, ProjectionKind], tuple[TensorRef, ...]] = {}
    missing: dict[ProjectionKind, list[int]] = {}
    for kind in ProjectionKind:
        if kind not in requested:
            continue
        for layer in range(cfg.num_layers):
            refs = collected.get((layer, kind))
            if not refs:
                missing.setdefault(kind, []).append(layer)
                continue
            refs = sorted(
                refs, key=lambda r: ((0, r.expert) if r.expert is not None else (1, 0), r.name)
            )
            routed = [r.expert for r in refs if r.expert is not None]
            shared = [r for r in refs if r.expert is None]
            if kind in ATTENTION_KINDS or cfg.num_experts == 0:
                if len(refs) != 1:
                    raise AmbiguousPattern(
                        f"layer {layer} kind {kind.value}: {len(refs)} tensors resolve to "
                        f"one slot: {[r.name for r in refs]}"
                    )
            else:
                if routed != list(range(cfg.num_experts)):
                    raise ShapeContradiction(
                        f"layer {layer} kind {kind.value}: expert indices {routed} do not "
                        f"cover 0..{cfg.num_experts - 1}"
                    )
                if len(shared) > 1:
                    raise AmbiguousPattern(
                        f"layer {layer} kind {kind.value}: multiple shared-expert tensors"
                    )
            entries[(layer, kind)] = tuple(refs)
    if missing:
        detail = "; ".join(
            f"kind {kind.value} unresolved for layers {layers}" for kind, layers in missing.items()
        )
        raise UnresolvedLayer(detail)
    return LayerTensorMap(entries)
