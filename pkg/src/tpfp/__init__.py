"""Checkpoint forensics: per-layer weight-std fingerprints and lineage comparison."""

__version__ = "0.1.0"

from .arch_map import (  # noqa: E402
    ATTENTION_KINDS,
    FFN_KINDS,
    LayerTensorMap,
    ModelConfig,
    ProjectionKind,
    load_config,
    load_mapping_rules,
    resolve_layers,
)
from .compare import (  # noqa: E402
    ComparisonReport,
    CorrelationMatrix,
    attention_aggregate,
    compare_fingerprints,
    interp_align,
    pairwise_matrix,
    p_value,
    pearson,
)
from .fingerprint import (  # noqa: E402
    Fingerprint,
    MoeMode,
    NormalizedSequence,
    StdSequence,
    deserialize_fingerprint,
    extract_fingerprint,
    normalize,
    read_fingerprint,
    serialize_fingerprint,
    write_fingerprint,
)
from .registry import Registry  # noqa: E402
from .tensor_store import (  # noqa: E402
    CheckpointHandle,
    DType,
    StreamStats,
    TensorHandle,
    decode_element,
    merge_stats,
    open_checkpoint,
    parse_header,
    tensor_std,
)

__all__ = [
    "__version__",
    "ATTENTION_KINDS",
    "FFN_KINDS",
    "CheckpointHandle",
    "ComparisonReport",
    "CorrelationMatrix",
    "DType",
    "Fingerprint",
    "LayerTensorMap",
    "ModelConfig",
    "MoeMode",
    "NormalizedSequence",
    "ProjectionKind",
    "Registry",
    "StdSequence",
    "StreamStats",
    "TensorHandle",
    "attention_aggregate",
    "compare_fingerprints",
    "decode_element",
    "deserialize_fingerprint",
    "extract_fingerprint",
    "interp_align",
    "load_config",
    "load_mapping_rules",
    "merge_stats",
    "normalize",
    "open_checkpoint",
    "p_value",
    "pairwise_matrix",
    "parse_header",
    "pearson",
    "read_fingerprint",
    "resolve_layers",
    "serialize_fingerprint",
    "tensor_std",
    "write_fingerprint",
]
