"""Run manifests: config hash, versions, seed and a checksum per output file.

The manifest is written after every other file of a run.  Its timestamp
comes from ``SOURCE_DATE_EPOCH`` (0 when unset), so re-running a config
reproduces the manifest byte for byte.
"""

from __future__ import annotations

import json
import os
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND
from .storage import dump_json, sha256_file

MANIFEST_NAME = "manifest.json"


def build_timestamp() -> str:
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0") or 0)
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    scenario: str = ""
    backend: str = BACKEND
    files: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        stamp = build_timestamp()
        return {
            "command": self.command,
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "seed": int(self.seed),
            "versions": {
                "stochmech": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "backend": self.backend,
            "timestamps": {"started": stamp, "finished": stamp},
            "files": dict(sorted(self.files.items())),
        }

    def write(self, run_dir) -> Path:
        """Checksum every file under ``run_dir`` and write the manifest last."""
        run_dir = Path(run_dir)
        self.files = {}
        for p in sorted(run_dir.rglob("*")):
            if p.is_file() and p.name != MANIFEST_NAME:
                self.files[p.relative_to(run_dir).as_posix()] = sha256_file(p)
        return dump_json(self.to_dict(), run_dir / MANIFEST_NAME)


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"{run_dir} has no {MANIFEST_NAME}")
    with open(path) as fh:
        return json.load(fh)
