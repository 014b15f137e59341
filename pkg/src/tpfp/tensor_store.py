"""Safetensors checkpoint access and streaming tensor statistics.

File layout handled here: bytes [0, 8) hold a little-endian u64 giving the
header length H, bytes [8, 8+H) hold a UTF-8 JSON object mapping tensor name
to {dtype, shape, data_offsets}, and the data region follows. data_offsets
are relative to the start of the data region. A sharded checkpoint adds an
index JSON file whose "weight_map" maps tensor names to shard filenames.

Standard deviations are accumulated in float64 over fixed 8 MiB chunks,
merged in ascending chunk order, so results are reproducible regardless of
how the work is scheduled.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateTensor,
    DuplicateTensor,
    HeaderMalformed,
    MissingIndex,
    NonFiniteEncountered,
    SizeMismatch,
    TensorNotFound,
    UnsupportedDType,
)

CHUNK_BYTES = 8 * 1024 * 1024

_MAX_HEADER_BYTES = 1 << 30


class DType(Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @classmethod
    def from_name(cls, name: str) -> "DType":
        try:
            return cls(name)
        except ValueError:
            raise UnsupportedDType(f"unsupported dtype {name!r}") from None


_ITEMSIZE = {DType.F64: 8, DType.F32: 4, DType.F16: 2, DType.BF16: 2}


@dataclass(frozen=True)
class TensorHandle:
    """Location of one named tensor inside a (possibly sharded) checkpoint."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    byte_range: tuple[int, int]  # relative to the shard's data region
    shard_id: int = 0

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class CheckpointHandle:
    """Parsed headers of every shard; no payload bytes are read on open."""

    root_path: Path
    shards: tuple[Path, ...]
    data_starts: tuple[int, ...]  # absolute file offset of each shard's data region
    tensors: dict[str, TensorHandle]
    total_bytes: int


@dataclass(frozen=True)
class StreamStats:
    """Running count / mean / sum of squared deviations for one sample set."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0


def merge_stats(a: StreamStats, b: StreamStats) -> StreamStats:
    """Combine two accumulators as if their samples were concatenated.

    Merging with empty stats returns the other operand unchanged.
    """
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    count = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / count)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / count)
    return StreamStats(count, mean, m2)


def _stats_of(x: np.ndarray) -> StreamStats:
    # two-pass within a chunk: mean first, then squared deviations
    if x.size == 0:
        return StreamStats()
    mean = float(x.mean())
    diff = x - mean
    return StreamStats(x.size, mean, float(np.sum(diff * diff)))


def sample_std(stats: StreamStats) -> float:
    """Bessel-corrected standard deviation (divisor n-1) of an accumulator."""
    if stats.count < 2:
        raise DegenerateTensor(f"need at least 2 elements, have {stats.count}")
    return math.sqrt(max(stats.m2, 0.0) / (stats.count - 1))


# --- element decoding -----------------------------------------------------


def decode_element(raw: bytes, dtype: DType) -> float:
    """Decode one little-endian element to a Python float (f64)."""
    if len(raw) != dtype.itemsize:
        raise ValueError(f"expected {dtype.itemsize} bytes for {dtype.value}, got {len(raw)}")
    if dtype is DType.F64:
        return struct.unpack("<d", raw)[0]
    if dtype is DType.F32:
        return struct.unpack("<f", raw)[0]
    if dtype is DType.F16:
        return struct.unpack("<e", raw)[0]
    # BF16 is the upper 16 bits of an f32 bit pattern
    return struct.unpack("<f", b"\x00\x00" + raw)[0]


def decode_array(raw: bytes, dtype: DType) -> np.ndarray:
    """Decode a little-endian byte run to a 1-D float64 array."""
    if dtype is DType.F64:
        return np.frombuffer(raw, dtype="<f8")
    if dtype is DType.F32:
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if dtype is DType.F16:
        return np.frombuffer(raw, dtype="<f2").astype(np.float64)
    bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
    return bits.view(np.float32).astype(np.float64)


# --- header parsing -------------------------------------------------------


def parse_header(prefix_bytes: bytes) -> dict[str, TensorHandle]:
    """Parse a length-prefixed header into name -> TensorHandle.

    The returned dict iterates in sorted-name order. Byte ranges are checked
    against shape x dtype size and against each other for overlap.
    """
    if len(prefix_bytes) < 8:
        raise HeaderMalformed("file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack_from("<Q", prefix_bytes, 0)
    if header_len > _MAX_HEADER_BYTES:
        raise HeaderMalformed(f"declared header length {header_len} is implausible")
    if len(prefix_bytes) < 8 + header_len:
        raise HeaderMalformed("declared header length runs past the available bytes")
    try:
        doc = json.loads(prefix_bytes[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMalformed(f"header is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise HeaderMalformed("header JSON is not an object")

    handles: dict[str, TensorHandle] = {}
    for name in sorted(doc):
        meta = doc[name]
        if name == "__metadata__":
            if not isinstance(meta, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
            ):
                raise HeaderMalformed("__metadata__ must map strings to strings")
            continue
        if not isinstance(meta, dict):
            raise HeaderMalformed(f"entry for {name!r} is not an object")
        dtype_name = meta.get("dtype")
        shape = meta.get("shape")
        offsets = meta.get("data_offsets")
        if not isinstance(dtype_name, str):
            raise HeaderMalformed(f"{name!r}: missing or non-string dtype")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise HeaderMalformed(f"{name!r}: shape must be a list of non-negative ints")
        if (
            not isinstance(offsets, (list, tuple))
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
        ):
            raise HeaderMalformed(f"{name!r}: data_offsets must be two non-negative ints")
        dtype = DType.from_name(dtype_name)
        start, end = int(offsets[0]), int(offsets[1])
        if end < start:
            raise HeaderMalformed(f"{name!r}: data_offsets end before start")
        expected = math.prod(shape) * dtype.itemsize
        if end - start != expected:
            raise SizeMismatch(
                f"{name!r}: offsets span {end - start} bytes but "
                f"shape {shape} x {dtype.value} needs {expected}"
            )
        handles[name] = TensorHandle(name, dtype, tuple(shape), (start, end))

    spans = sorted((h.byte_range, h.name) for h in handles.values())
    for (prev_range, prev_name), (cur_range, cur_name) in zip(spans, spans[1:]):
        if cur_range[0] < prev_range[1]:
            raise HeaderMalformed(f"byte ranges of {prev_name!r} and {cur_name!r} overlap")
    return handles


def _read_shard_header(path: Path) -> tuple[dict[str, TensorHandle], int, int]:
    size = path.stat().st_size
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise HeaderMalformed(f"{path.name}: file shorter than the length prefix")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > _MAX_HEADER_BYTES:
            raise HeaderMalformed(f"{path.name}: declared header length {header_len} is implausible")
        header = f.read(header_len)
    if len(header) < header_len:
        raise HeaderMalformed(f"{path.name}: truncated header")
    handles = parse_header(prefix + header)
    data_start = 8 + header_len
    data_len = size - data_start
    for h in handles.values():
        if h.byte_range[1] > data_len:
            raise SizeMismatch(f"{path.name}: tensor {h.name!r} extends past end of file")
    return handles, data_start, size


def open_checkpoint(path: os.PathLike | str) -> CheckpointHandle:
    """Open a checkpoint directory and parse every shard header.

    Accepts either a single ``*.safetensors`` file or an index JSON
    (``*.safetensors.index.json``) plus the shard files it references.
    """
    root = Path(path)
    if not root.is_dir():
        raise MissingIndex(f"{root} is not a readable checkpoint directory")

    index_files = sorted(root.glob("*.safetensors.index.json"))
    weight_map: dict[str, str] | None = None
    if len(index_files) > 1:
        raise MissingIndex(f"{root}: multiple index files: {[p.name for p in index_files]}")
    if index_files:
        index_path = index_files[0]
        try:
            index_doc = json.loads(index_path.read_text("utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HeaderMalformed(f"{index_path.name}: unreadable index: {exc}") from exc
        weight_map = index_doc.get("weight_map") if isinstance(index_doc, dict) else None
        if not isinstance(weight_map, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in weight_map.items()
        ):
            raise HeaderMalformed(f"{index_path.name}: missing or invalid weight_map")
        shard_paths = [root / s for s in sorted(set(weight_map.values()))]
        missing = [p.name for p in shard_paths if not p.is_file()]
        if missing:
            raise MissingIndex(f"{index_path.name} references missing shard(s): {missing}")
    else:
        candidates = sorted(root.glob("*.safetensors"))
        if len(candidates) == 0:
            raise MissingIndex(f"{root}: no safetensors file or index found")
        if len(candidates) > 1:
            raise MissingIndex(
                f"{root}: multiple safetensors files without an index: "
                f"{[p.name for p in candidates]}"
            )
        shard_paths = candidates

    tensors: dict[str, TensorHandle] = {}
    data_starts: list[int] = []
    total_bytes = 0
    for shard_id, shard_path in enumerate(shard_paths):
        handles, data_start, size = _read_shard_header(shard_path)
        data_starts.append(data_start)
        total_bytes += size
        for name, handle in handles.items():
            if name in tensors:
                raise DuplicateTensor(f"tensor {name!r} appears in more than one shard")
            tensors[name] = replace(handle, shard_id=shard_id)

    if weight_map is not None:
        unlisted = sorted(set(weight_map) - set(tensors))
        if unlisted:
            raise HeaderMalformed(f"index lists tensors absent from shard headers: {unlisted}")

    tensors = {name: tensors[name] for name in sorted(tensors)}
    return CheckpointHandle(root, tuple(shard_paths), tuple(data_starts), tensors, total_bytes)


# --- streaming statistics ---------------------------------------------------


def _pread_exact(fd: int, length: int, offset: int, context: str) -> bytes:
    parts = []
    remaining = length
    pos = offset
    while remaining > 0:
        chunk = os.pread(fd, remaining, pos)
        if not chunk:
            raise SizeMismatch(f"{context}: unexpected end of file")
        parts.append(chunk)
        remaining -= len(chunk)
        pos += len(chunk)
    return b"".join(parts)


def _resolve_span(
    ckpt: CheckpointHandle, name: str, region: tuple[int, int] | None
) -> tuple[TensorHandle, int, int, int]:
    """Return (handle, start, end, element_offset) for a tensor or row slice."""
    handle = ckpt.tensors.get(name)
    if handle is None:
        raise TensorNotFound(f"tensor {name!r} not in checkpoint {ckpt.root_path}")
    start, end = handle.byte_range
    elem_offset = 0
    if region is not None:
        if len(handle.shape) != 2:
            raise ValueError(f"row region given for non-2-D tensor {name!r}")
        row_start, row_end = region
        rows, cols = handle.shape
        if not (0 <= row_start <= row_end <= rows):
            raise ValueError(f"row region {region} out of bounds for {name!r} with {rows} rows")
        row_bytes = cols * handle.dtype.itemsize
        end = start + row_end * row_bytes
        start = start + row_start * row_bytes
        elem_offset = row_start * cols
    return handle, start, end, elem_offset


def tensor_stats(
    ckpt: CheckpointHandle, name: str, region: tuple[int, int] | None = None
) -> StreamStats:
    """Stream a tensor (or contiguous row slice) and accumulate its stats.

    Chunks are read in ascending order and merged left-to-right, so repeated
    runs produce bit-identical accumulators. Any non-finite element aborts
    with its tensor name and flat index.
    """
    handle, start, end, elem_offset = _resolve_span(ckpt, name, region)
    itemsize = handle.dtype.itemsize
    shard = ckpt.shards[handle.shard_id]
    base = ckpt.data_starts[handle.shard_id]

    acc = StreamStats()
    fd = os.open(shard, os.O_RDONLY)
    try:
        pos = start
        while pos < end:
            length = min(CHUNK_BYTES, end - pos)
            raw = _pread_exact(fd, length, base + pos, f"{shard.name}:{name}")
            values = decode_array(raw, handle.dtype)
            finite = np.isfinite(values)
            if not finite.all():
                local = int(np.argmin(finite))
                flat = elem_offset + (pos - start) // itemsize + local
                raise NonFiniteEncountered(
                    f"tensor {name!r} has a non-finite element at flat index {flat}"
                )
            acc = merge_stats(acc, _stats_of(values))
            pos += length
    finally:
        os.close(fd)
    return acc


def tensor_std(
    ckpt: CheckpointHandle, name: str, region: tuple[int, int] | None = None
) -> float:
    """Bessel-corrected std of all elements of a tensor or row slice."""
    stats = tensor_stats(ckpt, name, region)
    if stats.count < 2:
        raise DegenerateTensor(
            f"tensor {name!r} region {region} has {stats.count} element(s); need >= 2"
        )
    return sample_std(stats)


def read_tensor_f64(
    ckpt: CheckpointHandle, name: str, region: tuple[int, int] | None = None
) -> np.ndarray:
    """Materialize a tensor (or row slice) as a shaped float64 array.

    Diagnostic and fixture helper; the fingerprint path streams instead.
    """
    handle, start, end, _ = _resolve_span(ckpt, name, region)
    fd = os.open(ckpt.shards[handle.shard_id], os.O_RDONLY)
    try:
        raw = _pread_exact(
            fd, end - start, ckpt.data_starts[handle.shard_id] + start, name
        )
    finally:
        os.close(fd)
    values = decode_array(raw, handle.dtype)
    if region is not None:
        return values.reshape(region[1] - region[0], handle.shape[1])
    return values.reshape(handle.shape)
