"""Per-stage run manifests for reproducibility checks.

Every CLI stage writes ``manifest_<stage>.json`` recording hashes of its
inputs and outputs, the config hash, the prompt version, and timings.
Identical input/config/prompt hashes imply byte-identical outputs;
manifests themselves carry timings, so they are compared field-wise, not
byte-wise.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .annotate import PROMPT_VERSION


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_paths(paths) -> dict:
    """Map of path name -> content hash, sorted for stable output.

    Directories are expanded to their files, recursively."""
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return dict(sorted(out.items()))


class StageTimer:
    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self._t0
        return False


def write_manifest(out_dir, stage: str, *, inputs, outputs, config_hash: str,
                   elapsed: float, extra: dict | None = None) -> Path:
    doc = {
        "stage": stage,
        "config_hash": config_hash,
        "prompt_version": PROMPT_VERSION,
        "inputs": hash_paths(inputs),
        "outputs": hash_paths(outputs),
        "elapsed_seconds": round(elapsed, 6),
    }
    if extra:
        doc.update(extra)
    path = Path(out_dir) / f"manifest_{stage}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def read_manifest(out_dir, stage: str) -> dict:
    path = Path(out_dir) / f"manifest_{stage}.json"
    return json.loads(path.read_text(encoding="utf-8"))
