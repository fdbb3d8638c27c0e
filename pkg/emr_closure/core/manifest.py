"""
EMR Closure - Run Manifest
One manifest.json per command run: what ran, with which settings, seeds and files
"""
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    version: str
    seeds: List[int] = field(default_factory=list)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    arguments: Dict[str, Any] = field(default_factory=dict)
    started: datetime = field(default_factory=datetime.now)
    finished: Optional[datetime] = None
    wall_clock: float = 0.0
    status: str = "running"
    _clock: float = field(default_factory=time.perf_counter, repr=False)

    def add_input(self, path: Union[str, Path]) -> None:
        self.inputs.append(str(path))

    def add_output(self, path: Union[str, Path]) -> None:
        self.outputs.append(str(path))

    def finish(self, status: str = "ok") -> "RunManifest":
        self.finished = datetime.now()
        self.wall_clock = time.perf_counter() - self._clock
        self.status = status
        return self

    def export(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "arguments": self.arguments,
            "version": self.version,
            "status": self.status,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config": self.config,
            "metadata": {
                "started": self.started.isoformat(),
                "finished": self.finished.isoformat() if self.finished else None,
                "wall_clock_seconds": round(self.wall_clock, 6),
                "python": platform.python_version(),
            },
        }

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        with open(path, "w") as f:
            json.dump(self.export(), f, indent=2, default=str)
        logger.debug(f"Manifest written to {path}")
        return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path) as f:
        return json.load(f)
