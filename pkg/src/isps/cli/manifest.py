"""Run manifest: one JSON document per output directory.

Each stage records the digest of everything it consumed (``input_hash``) and
of every file it wrote. A stage whose input digest is unchanged and whose
files are intact is skipped. Timestamps live only in keys ending in ``_at``.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
from pathlib import Path

from .. import __version__

STAGES = ("generate-data", "train", "certify", "simulate", "report")
MANIFEST_NAME = "manifest.json"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, out_dir: Path, data: dict):
        self.out_dir = Path(out_dir)
        self.data = data

    @classmethod
    def open(cls, out_dir, config_hash: str) -> "RunManifest":
        out_dir = Path(out_dir)
        path = out_dir / MANIFEST_NAME
        if path.exists():
            data = json.loads(path.read_text())
        else:
            data = {"tool": "isps", "tool_version": __version__, "created_at": _now(), "stages": {},
                    "history": []}
        data["config_hash"] = config_hash
        return cls(out_dir, data)

    @property
    def path(self) -> Path:
        return self.out_dir / MANIFEST_NAME

    def stage(self, name: str) -> dict | None:
        return self.data["stages"].get(name)

    def missing(self, names) -> list[str]:
        return [s for s in names if s not in self.data["stages"]]

    def output_hash(self, name: str) -> str:
        """Digest standing in for a stage's outputs when hashing downstream inputs."""
        st = self.stage(name)
        return "" if st is None else hashlib.sha256(
            json.dumps([st["input_hash"], st.get("files", {}), st.get("results", {})], sort_keys=True).encode()
        ).hexdigest()

    def is_current(self, name: str, input_hash: str) -> bool:
        st = self.stage(name)
        if st is None or st["input_hash"] != input_hash:
            return False
        for rel, h in st.get("files", {}).items():
            p = self.out_dir / rel
            if not p.exists() or file_digest(p) != h:
                return False
        return True

    def record(self, name: str, input_hash: str, files: list[Path], results: dict) -> None:
        rels = {str(Path(f).relative_to(self.out_dir)): file_digest(f) for f in sorted(files)}
        self.data["stages"][name] = {"input_hash": input_hash, "files": rels, "results": results,
                                     "finished_at": _now()}
        self.data["history"].append({"stage": name, "input_hash": input_hash, "status": "ran", "at": _now()})
        self.save()

    def note_cached(self, name: str, input_hash: str) -> None:
        self.data["history"].append({"stage": name, "input_hash": input_hash, "status": "cached", "at": _now()})
        self.save()

    def save(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.data["updated_at"] = _now()
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def strip_timestamps(obj):
    """Copy of a manifest with every ``*_at`` key removed (for run comparisons)."""
    if isinstance(obj, dict):
        return {k: strip_timestamps(v) for k, v in obj.items() if not (k.endswith("_at") or k == "at")}
    if isinstance(obj, list):
        return [strip_timestamps(v) for v in obj]
    return obj
