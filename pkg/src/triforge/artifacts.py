"""Content-addressed artifact store with provenance tracking.

Each named artifact is a file under one directory tree. An index records
its content hash, the hash of the config that produced it, and the content
hashes of the upstream artifacts it was built from — enough to decide
whether a cached copy is still valid on rerun.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class ArtifactError(RuntimeError):
    pass


def file_hash(path) -> str:
    """Content hash of a file, or of a directory tree (names + bytes)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for sub in sorted(path.rglob("*")):
            if sub.is_file():
                h.update(str(sub.relative_to(path)).encode())
                h.update(sub.read_bytes())
        return h.hexdigest()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactStore:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self.index = {}
        if self.index_path.exists():
            self.index = json.loads(self.index_path.read_text())

    def _save_index(self):
        self.index_path.write_text(
            json.dumps(self.index, indent=2, sort_keys=True) + "\n")

    def path_for(self, name) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def record(self, name, config_hash, upstream=()):
        """Index an artifact file that a stage just wrote.

        upstream: names of already-recorded artifacts this one was built
        from; their content hashes are frozen into the entry.
        """
        path = self.root / name
        if not path.exists():
            raise ArtifactError(f"artifact file missing: {path}")
        deps = {}
        for dep in upstream:
            if dep not in self.index:
                raise ArtifactError(f"upstream artifact not recorded: {dep}")
            deps[dep] = self.index[dep]["hash"]
        self.index[name] = {
            "hash": file_hash(path),
            "config_hash": config_hash,
            "upstream": deps,
        }
        self._save_index()
        return self.index[name]

    def fresh(self, name, config_hash, upstream=()) -> bool:
        """True when the cached artifact can be reused as-is."""
        entry = self.index.get(name)
        if entry is None or not (self.root / name).exists():
            return False
        if entry["config_hash"] != config_hash:
            return False
        if set(entry["upstream"]) != set(upstream):
            return False
        for dep, dep_hash in entry["upstream"].items():
            cur = self.index.get(dep)
            if cur is None or cur["hash"] != dep_hash:
                return False
        if file_hash(self.root / name) != entry["hash"]:
            return False
        return True

    def get(self, name) -> Path:
        if name not in self.index or not (self.root / name).exists():
            raise ArtifactError(f"missing artifact: {name}")
        return self.root / name

    def hash_of(self, name) -> str:
        if name not in self.index:
            raise ArtifactError(f"missing artifact: {name}")
        return self.index[name]["hash"]

    def missing(self, names):
        return [n for n in names
                if n not in self.index or not (self.root / n).exists()]
