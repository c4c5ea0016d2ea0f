"""Provenance record attached to every report."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

_BLOCK = 1 << 20


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while block := f.read(_BLOCK):
            h.update(block)
    return "sha256:" + h.hexdigest()


def expand_inputs(path) -> list[Path]:
    """A checkpoint argument may name a directory or a shard index; digest every file behind it."""
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file())
    if path.name.endswith(".json") and path.exists():
        try:
            weight_map = json.loads(path.read_text()).get("weight_map", {})
        except (ValueError, AttributeError):
            weight_map = {}
        return [path] + [path.parent / s for s in sorted(set(weight_map.values()))]
    return [path]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    parameters: dict
    inputs: list[dict] = field(default_factory=list)
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""

    def add_input(self, path) -> None:
        for p in expand_inputs(path):
            self.inputs.append({"path": str(p), "digest": file_digest(p)})

    def finish(self) -> "RunManifest":
        self.finished = _now()
        return self

    def to_dict(self) -> dict:
        return {"command": self.command, "version": self.version, "inputs": self.inputs,
                "parameters": self.parameters, "started": self.started, "finished": self.finished}
