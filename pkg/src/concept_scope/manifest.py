"""Dataset manifests: an ordered list of (image path, class label)."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .backend import load_image


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # as written in the manifest
    resolved: Path
    label: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    hash: str
    source: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries})

    def load(self, index: int, size: int | None = None) -> np.ndarray:
        return load_image(self.entries[index].resolved, size)

    def loader(self, index: int, size: int | None = None):
        return lambda: self.load(index, size)

    def key(self, index: int) -> tuple[str, int]:
        return (self.hash, index)

    def indices_with_label(self, label: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.label == label]

    def find(self, path: str | Path) -> int:
        """Index of an entry given either its manifest string or a filesystem path."""
        target = str(path)
        for i, e in enumerate(self.entries):
            if e.path == target:
                return i
        resolved = Path(path).resolve()
        for i, e in enumerate(self.entries):
            if e.resolved == resolved:
                return i
        raise ManifestError(f"image not in manifest: {path}")


def _read_rows(path: Path) -> list[tuple[str, str]]:
    text = path.read_text()
    if not text.strip():
        raise ManifestError(f"empty manifest: {path}")
    if path.suffix.lower() == ".json":
        data = json.loads(text)
        if not isinstance(data, list):
            raise ManifestError("JSON manifest must be an array")
        rows = []
        for item in data:
            if isinstance(item, dict):
                rows.append((str(item["path"]), str(item["label"])))
            else:
                p, lab = item
                rows.append((str(p), str(lab)))
        return rows
    reader = csv.reader(text.splitlines())
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if rows and [c.strip().lower() for c in rows[0]] == ["path", "label"]:
        rows = rows[1:]
    out = []
    for n, r in enumerate(rows, start=1):
        if len(r) != 2:
            raise ManifestError(f"row {n}: expected 'path,label', got {r}")
        out.append((r[0].strip(), r[1].strip()))
    return out


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def ingest_manifest(
    path: str | Path,
    classes: Sequence[str] | None = None,
    check_images: bool = True,
) -> Manifest:
    """Read a CSV (``path,label``) or JSON manifest.

    Paths are resolved relative to the manifest's directory. The hash covers
    paths, labels and image bytes, in file order.
    """
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise ManifestError(f"empty manifest: {path}")
    seen: dict[str, int] = {}
    for n, (p, _) in enumerate(rows, start=1):
        if p in seen:
            raise ManifestError(f"duplicate path {p!r} at row {n} (first seen at row {seen[p]})")
        seen[p] = n
    if classes is not None:
        unknown = sorted({lab for _, lab in rows if lab not in classes})
        if unknown:
            raise ManifestError(f"unknown labels {unknown}; model classes are {list(classes)}")

    base = path.parent
    entries = [ManifestEntry(p, (base / p).resolve(), lab) for p, lab in rows]
    h = hashlib.sha256()
    bad = []
    for e in entries:
        try:
            digest = _file_sha(e.resolved)
            if check_images:
                with Image.open(e.resolved) as im:
                    im.verify()
        except Exception as exc:  # PIL raises many exception types on corrupt files
            bad.append(f"{e.path}: {exc}")
            continue
        h.update(f"{e.path}\t{e.label}\t{digest}\n".encode())
    if bad:
        raise ManifestError("unreadable images:\n  " + "\n  ".join(bad))
    return Manifest(entries, h.hexdigest()[:16], path)


def write_manifest(path: str | Path, rows: Sequence[tuple[str, str]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerows(rows)
    return path
