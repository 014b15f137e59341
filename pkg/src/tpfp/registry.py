"""Directory-backed fingerprint registry with a regenerable index.

The directory's ``*.tpfp.json`` files are the source of truth; ``index.json``
is a cache rebuilt from a scan whenever it disagrees. Mutations take an
exclusive lock file so concurrent adds cannot corrupt the index.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from .errors import DuplicateModelId
from .fingerprint import (
    FINGERPRINT_SUFFIX,
    Fingerprint,
    canonical_dumps,
    deserialize_fingerprint,
    read_fingerprint,
)

_INDEX_NAME = "index.json"
_LOCK_NAME = ".tpfp.lock"

_UNSAFE_CHARS = re.compile(r"[^A-Za-z0-9._-]+")


def _safe_file_name(model_id: str) -> str:
    return _UNSAFE_CHARS.sub("_", model_id) + FINGERPRINT_SUFFIX


@dataclass(frozen=True)
class RegistryEntry:
    model_id: str
    file_name: str
    content_hash: str
    num_layers: int
    kinds: tuple[str, ...]


class Registry:
    """Content-hashed store of extracted fingerprints for offline reuse."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    @property
    def index_path(self) -> Path:
        return self.root / _INDEX_NAME

    def _lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(self.root / _LOCK_NAME)

    def scan(self) -> dict[str, RegistryEntry]:
        """Read every fingerprint file; each one's content hash is verified."""
        entries: dict[str, RegistryEntry] = {}
        if not self.root.is_dir():
            return entries
        for path in sorted(self.root.glob(f"*{FINGERPRINT_SUFFIX}")):
            fp = read_fingerprint(path)
            if fp.model_id in entries:
                raise DuplicateModelId(
                    f"model id {fp.model_id!r} stored twice: "
                    f"{entries[fp.model_id].file_name} and {path.name}"
                )
            entries[fp.model_id] = RegistryEntry(
                model_id=fp.model_id,
                file_name=path.name,
                content_hash=fp.content_hash,
                num_layers=fp.num_layers,
                kinds=tuple(k.value for k in fp.kinds),
            )
        return entries

    def _write_index(self, entries: dict[str, RegistryEntry]) -> None:
        doc = {
            "schema_version": 1,
            "entries": {
                e.model_id: {
                    "file": e.file_name,
                    "content_hash": e.content_hash,
                    "num_layers": e.num_layers,
                    "kinds": list(e.kinds),
                }
                for e in entries.values()
            },
        }
        self.index_path.write_text(canonical_dumps(doc, indent=2) + "\n")

    def entries(self) -> list[RegistryEntry]:
        """Scan, repair a stale index if needed, and list entries by model id."""
        entries = self.scan()
        self._repair_index(entries)
        return [entries[k] for k in sorted(entries)]

    def _repair_index(self, entries: dict[str, RegistryEntry]) -> None:
        fresh = {
            e.model_id: {
                "file": e.file_name,
                "content_hash": e.content_hash,
                "num_layers": e.num_layers,
                "kinds": list(e.kinds),
            }
            for e in entries.values()
        }
        want = canonical_dumps({"schema_version": 1, "entries": fresh}, indent=2) + "\n"
        try:
            current = self.index_path.read_text("utf-8")
        except OSError:
            current = None
        if current != want:
            self.root.mkdir(parents=True, exist_ok=True)
            self.index_path.write_text(want)

    def add_serialized(self, data: bytes) -> Path:
        """Validate and store serialized fingerprint bytes; returns the new path."""
        fp = deserialize_fingerprint(data)
        with self._lock():
            entries = self.scan()
            if fp.model_id in entries:
                raise DuplicateModelId(f"model id {fp.model_id!r} already in registry")
            dest = self.root / _safe_file_name(fp.model_id)
            if dest.exists():
                raise DuplicateModelId(f"registry file {dest.name} already exists")
            dest.write_bytes(data)
            entries[fp.model_id] = RegistryEntry(
                fp.model_id,
                dest.name,
                fp.content_hash,
                fp.num_layers,
                tuple(k.value for k in fp.kinds),
            )
            self._write_index(entries)
        return dest

    def add(self, fp_path: Path | str) -> Path:
        """Copy an existing fingerprint file into the registry."""
        return self.add_serialized(Path(fp_path).read_bytes())

    def verify(self) -> list[RegistryEntry]:
        """Recompute every stored content hash; raises naming any bad file."""
        with self._lock():
            entries = self.scan()
            self._repair_index(entries)
        return [entries[k] for k in sorted(entries)]

    def fingerprints(self) -> list[Fingerprint]:
        """Load all stored fingerprints, ordered by model id."""
        return [read_fingerprint(self.root / e.file_name) for e in self.entries()]
