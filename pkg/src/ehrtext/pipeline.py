"""Stage manifest making pipeline commands resumable and idempotent.

Each stage records a digest of its config section, its input files and its
output files. A stage is current when all three match the recorded state;
re-running a current stage is a no-op. The manifest is written atomically
after the stage's outputs exist, so a killed run never leaves outputs that
claim to be complete.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Sequence


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(path: str | Path) -> str:
    """Digest of a directory: file names and contents, order-independent."""
    root = Path(path)
    h = hashlib.sha256()
    for sub in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = sub.relative_to(root).as_posix().encode("utf-8")
        h.update(len(rel).to_bytes(4, "little"))
        h.update(rel)
        h.update(bytes.fromhex(file_digest(sub)))
    return h.hexdigest()


def path_digest(path: str | Path) -> str:
    p = Path(path)
    return tree_digest(p) if p.is_dir() else file_digest(p)


def config_digest(obj: object) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RunManifest:
    VERSION = 1

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if self.path.exists():
            self.data = json.loads(self.path.read_text("utf-8"))
            if self.data.get("version") != self.VERSION:
                raise ValueError(f"unsupported manifest version in {self.path}")
        else:
            self.data = {"version": self.VERSION, "stages": {}}

    def _digest_map(self, paths: Sequence[str | Path]) -> dict[str, str]:
        return {str(p): path_digest(p) for p in paths}

    def stage_current(
        self, stage: str, cfg_digest: str, inputs: Sequence[str | Path]
    ) -> bool:
        """True when the stage ran with identical config and inputs and its
        recorded outputs are still present and unchanged."""
        entry = self.data["stages"].get(stage)
        if entry is None or entry["config"] != cfg_digest:
            return False
        try:
            if entry["inputs"] != self._digest_map(inputs):
                return False
            for out_path, digest in entry["outputs"].items():
                if not Path(out_path).exists() or path_digest(out_path) != digest:
                    return False
        except FileNotFoundError:
            return False
        return True

    def mark_stage(
        self,
        stage: str,
        cfg_digest: str,
        inputs: Sequence[str | Path],
        outputs: Sequence[str | Path],
    ) -> None:
        self.data["stages"][stage] = {
            "config": cfg_digest,
            "inputs": self._digest_map(inputs),
            "outputs": self._digest_map(outputs),
        }
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", "utf-8")
        os.replace(tmp, self.path)
