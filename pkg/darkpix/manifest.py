"""
Run manifests: the command, resolved configuration, seed, tool version and
SHA-256 content digests of every input and output of a CLI run.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Union

from Crypto.Hash import SHA256

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CHUNK_SIZE = 1 << 20


def digest_file(path: Union[str, Path]) -> str:
    """Hex SHA-256 of a file's contents."""
    h = SHA256.new()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(CHUNK_SIZE), b''):
            h.update(chunk)
    return h.hexdigest()


def digest_tree(paths: Iterable[Union[str, Path]]) -> Dict[str, str]:
    """
    Digest files and (recursively) directories.

    Keys are the given path for files and ``<dir>/<relative path>`` for
    directory members; manifests themselves are skipped.
    """
    digests = {}
    for path in paths:
        path = Path(path)
        if path.is_dir():
            for member in sorted(p for p in path.rglob("*") if p.is_file()):
                if member.name == MANIFEST_NAME:
                    continue
                digests[f"{path.name}/{member.relative_to(path).as_posix()}"] = digest_file(member)
        elif path.is_file():
            digests[path.name] = digest_file(path)
    return dict(sorted(digests.items()))


@dataclass
class RunManifest:
    """Replay record of one CLI run."""

    command: str
    config: Dict[str, Any]
    seed: int
    version: str
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'config': self.config,
            'seed': self.seed,
            'version': self.version,
            'inputs': self.inputs,
            'outputs': self.outputs,
        }

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write ``<out_dir>/manifest.json``."""
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        logger.debug(f"Wrote manifest {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'RunManifest':
        with open(path, 'r') as f:
            data = json.load(f)
        return cls(**data)
