import datetime
import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from rarevar import __version__
from rarevar.utils.error_handling import input_error
from rarevar.utils.output import to_json, write_json


def file_digest(path: str, chunk_size: int = 1 << 20) -> str:
    """sha256 of a file's bytes."""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as handle:
            for chunk in iter(lambda: handle.read(chunk_size), b""):
                digest.update(chunk)
    except FileNotFoundError:
        raise input_error(f"Input file not found: {path}", path=path, error_code="file_not_found")
    return digest.hexdigest()


@dataclass
class RunManifest:
    """
    What produced a set of outputs: command, effective configuration, input
    digests, seed and tool version, plus per-stage wall time.

    The digest covers everything except timings and the creation time, so
    reruns with the same inputs and flags share it.
    """
    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    version: str = __version__
    created: str = field(default_factory=lambda: datetime.datetime.now().isoformat())

    def add_input(self, role: str, path: Optional[str]) -> None:
        if path:
            self.inputs[role] = file_digest(path)

    @property
    def digest(self) -> str:
        payload = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "version": self.version,
        }
        return hashlib.sha256(to_json(payload).encode("utf-8")).hexdigest()[:16]

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "digest": self.digest,
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "inputs": dict(self.inputs),
            "outputs": [os.path.basename(p) for p in self.outputs],
            "timings": dict(self.timings),
            "created": self.created,
        }

    def write(self, path: str) -> str:
        return write_json(self.to_dict(), path)


def load_manifest(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
