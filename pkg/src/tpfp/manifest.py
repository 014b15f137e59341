"""Run manifests: the reproducibility record written next to CLI outputs."""

from __future__ import annotations

import hashlib
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .fingerprint import canonical_dumps


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(1024 * 1024):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path_for(output: Path) -> Path:
    """Sibling manifest name: drops the final suffix, adds .manifest.json."""
    return output.with_name(output.stem + ".manifest.json")


class RunRecorder:
    """Collects inputs/outputs during one CLI run and writes the manifest."""

    def __init__(self, command: str, arguments: list[str]):
        self.command = command
        self.arguments = list(arguments)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self._t0 = time.monotonic()
        self._started = datetime.now(timezone.utc).isoformat()

    def add_inputs(self, *paths: Path | str) -> None:
        self.inputs.extend(Path(p) for p in paths)

    def add_outputs(self, *paths: Path | str) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def write(self, manifest_path: Path) -> Path:
        doc = {
            "command": self.command,
            "arguments": self.arguments,
            "tool_version": __version__,
            "started_at": self._started,
            "wall_time_s": time.monotonic() - self._t0,
            "input_hashes": {str(p): sha256_file(p) for p in sorted(set(self.inputs))},
            "outputs": {str(p): sha256_file(p) for p in sorted(set(self.outputs))},
        }
        manifest_path.write_text(canonical_dumps(doc, indent=2) + "\n")
        return manifest_path
