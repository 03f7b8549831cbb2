"""Output writers: full-precision CSV, text files and the run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def fmt(v) -> str:
    """Round-trippable text for numbers (17 significant digits), plain str otherwise."""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".17g")
    if v is None:
        return ""
    if isinstance(v, np.floating):
        return format(float(v), ".17g")
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


class OutputDir:
    """Tracks every file written into a run directory so the manifest can list them."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def _track(self, p: Path) -> Path:
        if p not in self.files:
            self.files.append(p)
        return p

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) for v in r])
        return self._track(p)

    def write_text(self, name: str, text: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        return self._track(p)

    def inventory(self) -> list[dict]:
        return [{"path": str(p.relative_to(self.root)), "bytes": p.stat().st_size, "sha256": sha256(p)}
                for p in self.files]

    def write_manifest(self, manifest: dict, name: str = "manifest.json") -> Path:
        """Written last; lists every other file with its checksum."""
        data = dict(manifest)
        data["outputs"] = self.inventory()
        p = self.root / name
        p.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
        return p


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")
