"""Synthetic checkpoint generation for desk-scale verification.

Real checkpoints of interest run to hundreds of GB, so tests and demos use
generated safetensors checkpoints with controlled ground-truth per-layer
standard deviations. The generator draws seeded Gaussian matrices, recenters
them, and rescales so the pre-cast sample std of every matrix equals its
target exactly in float64; storage-dtype rounding then bounds the achievable
tolerance (about 1e-6 relative for F32, 1e-2 for BF16).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch_map import FFN_KINDS, ProjectionKind
from .errors import SpecInvalid
from .tensor_store import DType, decode_array, open_checkpoint, read_tensor_f64

_KIND_INDEX = {kind: i for i, kind in enumerate(ProjectionKind)}


@dataclass(frozen=True)
class SynthSpec:
    model_id: str
    num_layers: int
    hidden_size: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_size: int
    num_experts: int = 0
    shared_expert: bool = False
    identical_experts: bool = False
    dtype: DType = DType.F32
    seed: int = 0
    attention_layout: str = "separate"  # or "fused"
    num_shards: int = 1
    global_scale: float | None = None
    kinds: tuple[ProjectionKind, ...] = tuple(ProjectionKind)
    targets: dict = field(default_factory=dict)  # kind -> per-layer target stds
    means: dict = field(default_factory=dict)  # kind -> per-layer means
    include_decoys: bool = True
    vocab_size: int = 32


def load_synth_spec(source) -> SynthSpec:
    """Build a SynthSpec from a JSON file path or an already-parsed dict."""
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text("utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SpecInvalid(f"{source}: unreadable spec: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict):
        raise SpecInvalid("synth spec must be a JSON object")

    def need(key, kind=int):
        value = doc.get(key)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise SpecInvalid(f"synth spec field {key!r} missing or not {kind.__name__}")
        return value

    model_id = need("model_id", str)
    num_layers = need("num_layers")
    hidden = need("hidden_size")
    num_heads = need("num_heads")
    num_kv_heads = doc.get("num_kv_heads", num_heads)
    head_dim = doc.get("head_dim", hidden // num_heads if num_heads else 0)
    ffn_size = doc.get("ffn_size", 4 * hidden)
    if num_layers <= 0 or hidden <= 1 or num_heads <= 0:
        raise SpecInvalid("num_layers, hidden_size, num_heads must be positive")
    if not isinstance(num_kv_heads, int) or num_kv_heads <= 0 or num_heads % num_kv_heads:
        raise SpecInvalid(f"num_kv_heads {num_kv_heads} must divide num_heads {num_heads}")
    if not isinstance(head_dim, int) or head_dim <= 0:
        raise SpecInvalid("head_dim must be positive")

    try:
        dtype = DType(doc.get("dtype", "F32"))
    except ValueError:
        raise SpecInvalid(f"unknown dtype {doc.get('dtype')!r}") from None
    layout = doc.get("attention_layout", "separate")
    if layout not in ("separate", "fused"):
        raise SpecInvalid(f"attention_layout must be separate or fused, not {layout!r}")

    raw_kinds = doc.get("kinds")
    if raw_kinds is None:
        kinds = tuple(ProjectionKind)
    else:
        try:
            requested = {ProjectionKind(k) for k in raw_kinds}
        except ValueError:
            raise SpecInvalid(f"unknown projection kind in {raw_kinds!r}") from None
        kinds = tuple(k for k in ProjectionKind if k in requested)
    if not kinds:
        raise SpecInvalid("kinds must be non-empty")
    if layout == "fused" and any(
        k in kinds for k in (ProjectionKind.Q, ProjectionKind.K, ProjectionKind.V)
    ) and not all(
        k in kinds for k in (ProjectionKind.Q, ProjectionKind.K, ProjectionKind.V)
    ):
        raise SpecInvalid("fused layout emits Q, K, V together")

    def per_layer_map(key):
        raw = doc.get(key, {})
        if not isinstance(raw, dict):
            raise SpecInvalid(f"{key} must map kind names to per-layer lists")
        out = {}
        for kind_name, values in raw.items():
            try:
                kind = ProjectionKind(kind_name)
            except ValueError:
                raise SpecInvalid(f"{key}: unknown kind {kind_name!r}") from None
            if not isinstance(values, list) or len(values) != num_layers:
                raise SpecInvalid(f"{key}[{kind_name}] must list {num_layers} values")
            out[kind] = tuple(float(v) for v in values)
        return out

    num_experts = doc.get("num_experts", 0)
    if not isinstance(num_experts, int) or num_experts < 0:
        raise SpecInvalid("num_experts must be a non-negative integer")
    num_shards = doc.get("num_shards", 1)
    if not isinstance(num_shards, int) or num_shards < 1:
        raise SpecInvalid("num_shards must be a positive integer")

    return SynthSpec(
        model_id=model_id,
        num_layers=num_layers,
        hidden_size=hidden,
        num_heads=num_heads,
        num_kv_heads=num_kv_heads,
        head_dim=head_dim,
        ffn_size=ffn_size,
        num_experts=num_experts,
        shared_expert=bool(doc.get("shared_expert", False)),
        identical_experts=bool(doc.get("identical_experts", False)),
        dtype=dtype,
        seed=doc.get("seed", 0),
        attention_layout=layout,
        num_shards=num_shards,
        global_scale=doc.get("global_scale"),
        kinds=kinds,
        targets=per_layer_map("targets"),
        means=per_layer_map("means"),
        include_decoys=bool(doc.get("include_decoys", True)),
        vocab_size=doc.get("vocab_size", 32),
    )


# --- encoding / writing -------------------------------------------------------


def encode_array(x: np.ndarray, dtype: DType) -> bytes:
    """Little-endian encode a float64 array; BF16 uses round-to-nearest-even."""
    if dtype is DType.F64:
        return x.astype("<f8").tobytes()
    if dtype is DType.F32:
        return x.astype("<f4").tobytes()
    if dtype is DType.F16:
        return x.astype("<f2").tobytes()
    bits = x.astype(np.float32).view(np.uint32)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype("<u2").tobytes()


def _shard_name(index: int, total: int) -> str:
    if total == 1:
        return "model.safetensors"
    return f"model-{index + 1:05d}-of-{total:05d}.safetensors"


def write_checkpoint_files(
    out_dir: Path | str,
    tensors: "dict[str, np.ndarray]",
    dtype,
    config: dict | None = None,
    num_shards: int = 1,
) -> list[Path]:
    """Write float64 arrays as a (possibly sharded) safetensors checkpoint.

    dtype is a single DType or a per-name mapping. Tensor names are stored in
    sorted order with contiguous data offsets; shards split the sorted name
    list into near-equal contiguous groups.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(tensors)
    if num_shards < 1 or num_shards > len(names):
        raise SpecInvalid(f"num_shards {num_shards} invalid for {len(names)} tensors")

    def dtype_of(name: str) -> DType:
        return dtype[name] if isinstance(dtype, dict) else dtype

    written = []
    weight_map: dict[str, str] = {}
    total_data = 0
    for shard_idx in range(num_shards):
        lo = shard_idx * len(names) // num_shards
        hi = (shard_idx + 1) * len(names) // num_shards
        shard_names = names[lo:hi]
        header: dict[str, dict] = {}
        payloads = []
        offset = 0
        for name in shard_names:
            arr = np.asarray(tensors[name], dtype=np.float64)
            raw = encode_array(arr, dtype_of(name))
            header[name] = {
                "dtype": dtype_of(name).value,
                "shape": list(arr.shape),
                "data_offsets": [offset, offset + len(raw)],
            }
            payloads.append(raw)
            offset += len(raw)
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path = out / _shard_name(shard_idx, num_shards)
        with open(path, "wb") as f:
            f.write(len(header_bytes).to_bytes(8, "little"))
            f.write(header_bytes)
            for raw in payloads:
                f.write(raw)
        written.append(path)
        for name in shard_names:
            weight_map[name] = path.name
        total_data += offset

    if num_shards > 1:
        index = {"metadata": {"total_size": total_data}, "weight_map": weight_map}
        index_path = out / "model.safetensors.index.json"
        index_path.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
        written.append(index_path)
    if config is not None:
        cfg_path = out / "config.json"
        cfg_path.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
        written.append(cfg_path)
    return written


# --- generation -----------------------------------------------------------------


def _draw_matrix(rng: np.random.Generator, shape, target_std: float, mean: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    z -= z.mean()
    spread = math.sqrt(float(np.sum(z * z)) / (z.size - 1))
    return z * (target_std / spread) + mean


def _kind_shape(spec: SynthSpec, kind: ProjectionKind) -> tuple[int, int]:
    attn_rows = spec.num_heads * spec.head_dim
    kv_rows = spec.num_kv_heads * spec.head_dim
    return {
        ProjectionKind.Q: (attn_rows, spec.hidden_size),
        ProjectionKind.K: (kv_rows, spec.hidden_size),
        ProjectionKind.V: (kv_rows, spec.hidden_size),
        ProjectionKind.O: (spec.hidden_size, attn_rows),
        ProjectionKind.GATE: (spec.ffn_size, spec.hidden_size),
        ProjectionKind.UP: (spec.ffn_size, spec.hidden_size),
        ProjectionKind.DOWN: (spec.hidden_size, spec.ffn_size),
    }[kind]


def _target(spec: SynthSpec, kind: ProjectionKind, layer: int) -> float:
    if kind in spec.targets:
        return spec.targets[kind][layer]
    rng = np.random.default_rng([spec.seed, 7, _KIND_INDEX[kind]])
    return float(rng.uniform(0.5, 1.5, spec.num_layers)[layer])


def _mean(spec: SynthSpec, kind: ProjectionKind, layer: int) -> float:
    if kind in spec.means:
        return spec.means[kind][layer]
    return 0.0


def _matrix_for(spec: SynthSpec, kind: ProjectionKind, layer: int, expert: int) -> np.ndarray:
    draw_expert = 0 if spec.identical_experts else expert
    rng = np.random.default_rng([spec.seed, layer, _KIND_INDEX[kind], draw_expert])
    return _draw_matrix(rng, _kind_shape(spec, kind), _target(spec, kind, layer), _mean(spec, kind, layer))


def synth_config(spec: SynthSpec) -> dict:
    cfg = {
        "model_id": spec.model_id,
        "model_type": "synthetic",
        "num_hidden_layers": spec.num_layers,
        "hidden_size": spec.hidden_size,
        "num_attention_heads": spec.num_heads,
        "num_key_value_heads": spec.num_kv_heads,
        "head_dim": spec.head_dim,
        "intermediate_size": spec.ffn_size,
    }
    if spec.num_experts:
        cfg["num_experts"] = spec.num_experts
    return cfg


def generate_checkpoint(spec: SynthSpec, out_dir: Path | str) -> dict:
    """Write the checkpoint described by a spec; returns {kind: target stds}.

    Matrix draws depend only on (seed, layer, kind, expert), so the same seed
    produces the same matrices under either attention layout; the fused
    layout row-concatenates the Q, K, V draws.
    """
    tensors: dict[str, np.ndarray] = {}
    attn = [k for k in (ProjectionKind.Q, ProjectionKind.K, ProjectionKind.V) if k in spec.kinds]
    for layer in range(spec.num_layers):
        prefix = f"model.layers.{layer}"
        if spec.attention_layout == "fused" and attn:
            fused = np.concatenate(
                [_matrix_for(spec, k, layer, 0) for k in (ProjectionKind.Q, ProjectionKind.K, ProjectionKind.V)],
                axis=0,
            )
            tensors[f"{prefix}.self_attn.qkv_proj.weight"] = fused
        else:
            for kind in attn:
                name = f"{prefix}.self_attn.{kind.value.lower()}_proj.weight"
                tensors[name] = _matrix_for(spec, kind, layer, 0)
        if ProjectionKind.O in spec.kinds:
            tensors[f"{prefix}.self_attn.o_proj.weight"] = _matrix_for(
                spec, ProjectionKind.O, layer, 0
            )
        for kind in FFN_KINDS:
            if kind not in spec.kinds:
                continue
            stem = f"{kind.value.lower()}_proj.weight"
            if spec.num_experts == 0:
                tensors[f"{prefix}.mlp.{stem}"] = _matrix_for(spec, kind, layer, 0)
            else:
                for expert in range(spec.num_experts):
                    tensors[f"{prefix}.mlp.experts.{expert}.{stem}"] = _matrix_for(
                        spec, kind, layer, expert
                    )
                if spec.shared_expert:
                    tensors[f"{prefix}.mlp.shared_expert.{stem}"] = _matrix_for(
                        spec, kind, layer, spec.num_experts
                    )
        if spec.include_decoys:
            tensors[f"{prefix}.input_layernorm.weight"] = np.ones(spec.hidden_size)
    if spec.include_decoys:
        rng = np.random.default_rng([spec.seed, 1001])
        tensors["model.embed_tokens.weight"] = rng.standard_normal(
            (spec.vocab_size, spec.hidden_size)
        )
        tensors["model.norm.weight"] = np.ones(spec.hidden_size)

    if spec.global_scale is not None:
        # scale the values as stored: decode after the dtype cast, then rescale
        tensors = {
            name: decode_array(encode_array(arr, spec.dtype), spec.dtype).reshape(arr.shape)
            * spec.global_scale
            for name, arr in tensors.items()
        }

    write_checkpoint_files(
        out_dir, tensors, spec.dtype, config=synth_config(spec), num_shards=spec.num_shards
    )
    return {
        kind: tuple(_target(spec, kind, layer) for layer in range(spec.num_layers))
        for kind in spec.kinds
    }


# --- checkpoint transforms ------------------------------------------------------


def transform_checkpoint(
    src_dir: Path | str,
    dst_dir: Path | str,
    transform,
    model_id: str | None = None,
) -> None:
    """Rewrite a checkpoint applying transform(name, float64 array) -> array.

    Storage dtypes and shapes are preserved; config.json is copied with an
    optional model_id override. Fixture machinery for derivation experiments.
    """
    ckpt = open_checkpoint(src_dir)
    tensors = {}
    dtypes = {}
    for name, handle in ckpt.tensors.items():
        arr = transform(name, read_tensor_f64(ckpt, name))
        if arr.shape != handle.shape:
            raise SpecInvalid(f"transform changed shape of {name!r}")
        tensors[name] = arr
        dtypes[name] = handle.dtype

    config = None
    cfg_path = Path(src_dir) / "config.json"
    if cfg_path.is_file():
        config = json.loads(cfg_path.read_text("utf-8"))
        if model_id is not None:
            config["model_id"] = model_id
    write_checkpoint_files(dst_dir, tensors, dtypes, config=config, num_shards=1)


def perturb_checkpoint(
    src_dir: Path | str,
    dst_dir: Path | str,
    relative_scale: float = 0.1,
    seed: int = 0,
    model_id: str | None = None,
) -> None:
    """Copy a checkpoint adding Gaussian noise scaled to each tensor's std.

    Noise std is relative_scale times the tensor's own sample std, which
    models continued-training drift while preserving layer-to-layer shape.
    """
    counter = [0]

    def add_noise(name: str, arr: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng([seed, counter[0]])
        counter[0] += 1
        if arr.size < 2:
            return arr
        spread = float(np.std(arr, ddof=1))
        if spread == 0.0:
            return arr
        return arr + rng.standard_normal(arr.shape) * (relative_scale * spread)

    transform_checkpoint(src_dir, dst_dir, add_noise, model_id=model_id)
