"""Run manifests: what a command consumed and produced.

Re-running a command whose manifest lists identical command, config,
seed, and input hashes reproduces identical outputs (wall time aside).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path


def git_blob_sha1(path) -> str:
    """Hash file content the way git hashes blobs."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)   # path -> content hash
    outputs: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    _started: float = field(default_factory=time.perf_counter, repr=False)

    def add_input(self, path) -> None:
        p = Path(path)
        if p.exists():
            self.inputs[str(p)] = git_blob_sha1(p)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def finish(self, path) -> Path:
        self.wall_time = time.perf_counter() - self._started
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "command": self.command,
            "config": self.config_path,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time": self.wall_time,
        }
        out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return out
