"""Faithfulness-by-occlusion and part-localisation evaluation of importance maps."""

from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .msiv import upsample

BACKGROUND = "background"

# CUB-200-2011 part vocabulary, in part_id order; ties are resolved in this order
CUB_PARTS = (
    "back", "beak", "belly", "breast", "crown", "forehead", "left eye", "left leg",
    "left wing", "nape", "right eye", "right leg", "right wing", "tail", "throat",
)


class EmptyExplanationError(ValueError):
    pass


def mask_from_importance(importance: np.ndarray, image_size: int, q: float = 0.5) -> np.ndarray:
    """Boolean pixel mask of values at or above the q-quantile of the nonzero importances."""
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    up = upsample(importance, image_size)
    nonzero = up[up > 0]
    if nonzero.size == 0:
        raise EmptyExplanationError("empty explanation: importance matrix is all zero")
    return up >= np.quantile(nonzero, q)


@dataclass
class FaithfulnessReport:
    class_changed: list[bool]
    delta_c: list[float]
    classes: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.delta_c)

    def _frac(self, flags) -> float:
        return float(np.mean(flags)) if self.n else 0.0

    @property
    def fraction_class_change(self) -> float:
        return self._frac(self.class_changed)

    @property
    def fraction_decrease(self) -> float:
        return self._frac([d < 0 for d in self.delta_c])

    @property
    def fraction_increase(self) -> float:
        return self._frac([d > 0 for d in self.delta_c])

    @property
    def fraction_unchanged(self) -> float:
        return self._frac([d == 0 for d in self.delta_c])

    @property
    def mean_abs_delta(self) -> float:
        return float(np.mean(np.abs(self.delta_c))) if self.n else 0.0

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "fraction_class_change": self.fraction_class_change,
            "fraction_decrease": self.fraction_decrease,
            "fraction_increase": self.fraction_increase,
            "fraction_unchanged": self.fraction_unchanged,
            "mean_abs_delta": self.mean_abs_delta,
            "delta_basis": "class-c pre-softmax logit",
            "per_image": [
                {"class": c, "class_changed": ch, "delta_c": d}
                for c, ch, d in zip(self.classes, self.class_changed, self.delta_c)
            ],
        }


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[mask] = 0
    return out


def faithfulness(
    model,
    images: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    classes: Sequence[int],
    keys: Sequence | None = None,
) -> FaithfulnessReport:
    """Compare argmax class and class-c logit before and after zeroing the masked pixels.

    ``keys`` (one cache key per unmasked image) lets the model cache both passes.
    """
    if not len(images) == len(masks) == len(classes):
        raise ValueError("need one mask and one class per image")
    occluded = [apply_mask(im, m) for im, m in zip(images, masks)]
    masked_keys = None
    if keys is not None:
        masked_keys = [
            (k, "mask", hashlib.sha256(np.packbits(np.asarray(m, dtype=bool)).tobytes()).hexdigest()[:16])
            for k, m in zip(keys, masks)
        ]
    before = model.logits(list(images), None, keys)
    after = model.logits(occluded, None, masked_keys)
    changed = [bool(np.argmax(b) != np.argmax(a)) for b, a in zip(before, after)]
    delta = [float(a[c]) - float(b[c]) for b, a, c in zip(before, after, classes)]
    return FaithfulnessReport(changed, delta, [int(c) for c in classes])


@dataclass
class PartAnnotations:
    parts: list[tuple[str, float, float, bool]]  # name, x (column), y (row), visible
    bbox: tuple[float, float, float, float]  # x0, y0, x1, y1

    def scaled(self, sx: float, sy: float) -> "PartAnnotations":
        x0, y0, x1, y1 = self.bbox
        return PartAnnotations(
            [(n, x * sx, y * sy, v) for n, x, y, v in self.parts],
            (x0 * sx, y0 * sy, x1 * sx, y1 * sy),
        )


def importance_centroid(importance: np.ndarray, image_size: int) -> tuple[float, float]:
    """Importance-weighted centroid (x, y) in pixel units, pixel centres at +0.5."""
    m = np.asarray(importance, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise EmptyExplanationError("empty explanation: importance matrix is all zero")
    cell_h = image_size / m.shape[0]
    cell_w = image_size / m.shape[1]
    rows = (np.arange(m.shape[0]) + 0.5) * cell_h
    cols = (np.arange(m.shape[1]) + 0.5) * cell_w
    y = float((m.sum(axis=1) * rows).sum() / total)
    x = float((m.sum(axis=0) * cols).sum() / total)
    return x, y


def localize(
    importance: np.ndarray,
    ann: PartAnnotations,
    image_size: int,
    vocabulary: Sequence[str] = CUB_PARTS,
) -> str:
    """Nearest visible part to the importance centroid, or ``background`` outside the bbox."""
    visible = [(n, x, y) for n, x, y, v in ann.parts if v]
    if not visible:
        raise ValueError("no visible annotated part")
    cx, cy = importance_centroid(importance, image_size)
    x0, y0, x1, y1 = ann.bbox
    if not (x0 <= cx <= x1 and y0 <= cy <= y1):
        return BACKGROUND
    order = {name: i for i, name in enumerate(vocabulary)}
    best = min(visible, key=lambda p: ((p[1] - cx) ** 2 + (p[2] - cy) ** 2, order.get(p[0], len(order))))
    return best[0]


def concept_consistency(labels: Sequence[str]) -> dict:
    """Label histogram, share of the two most frequent parts, and background share."""
    if not labels:
        raise ValueError("no labels")
    counts = Counter(labels)
    n = len(labels)
    parts = sorted(((c, l) for l, c in counts.items() if l != BACKGROUND), key=lambda t: (-t[0], t[1]))
    top2 = parts[:2]
    return {
        "histogram": dict(sorted(counts.items())),
        "top2": [l for _, l in top2],
        "top2_share": sum(c for c, _ in top2) / n,
        "background_share": counts.get(BACKGROUND, 0) / n,
    }


def read_part_annotations(parts_csv: str | Path, bboxes_csv: str | Path) -> dict[str, tuple[PartAnnotations, tuple[float, float]]]:
    """Load ``image,part,x,y,visible`` and ``image,x0,y0,x1,y1,width,height`` CSVs.

    Returns image key -> (annotations in original pixels, (width, height)).
    """
    boxes = {}
    with open(bboxes_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            boxes[row["image"]] = (
                tuple(float(row[k]) for k in ("x0", "y0", "x1", "y1")),
                (float(row["width"]), float(row["height"])),
            )
    parts: dict[str, list] = {k: [] for k in boxes}
    with open(parts_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["image"] not in boxes:
                raise ValueError(f"part annotation for image without bbox: {row['image']}")
            parts[row["image"]].append((row["part"], float(row["x"]), float(row["y"]), row["visible"].strip() in ("1", "true", "True")))
    return {k: (PartAnnotations(parts[k], boxes[k][0]), boxes[k][1]) for k in boxes}


def convert_cub(root: str | Path, out_dir: str | Path) -> tuple[Path, Path]:
    """Re-encode CUB-200-2011 part and bbox text files as the CSVs read above.

    Image keys are the relative paths listed in ``images.txt`` (prefixed
    with ``images/``); image sizes are read from the image files.
    """
    root, out_dir = Path(root), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = {}
    for line in (root / "parts" / "parts.txt").read_text().splitlines():
        pid, name = line.split(" ", 1)
        names[pid] = name.strip()
    images = dict(line.split(" ", 1) for line in (root / "images.txt").read_text().splitlines() if line.strip())
    parts_path, boxes_path = out_dir / "parts.csv", out_dir / "bboxes.csv"
    with open(boxes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "x0", "y0", "x1", "y1", "width", "height"])
        for line in (root / "bounding_boxes.txt").read_text().splitlines():
            if not line.strip():
                continue
            iid, x, y, bw, bh = line.split()
            key = f"images/{images[iid].strip()}"
            with Image.open(root / key) as im:
                width, height = im.size
            x, y, bw, bh = map(float, (x, y, bw, bh))
            w.writerow([key, x, y, x + bw, y + bh, width, height])
    with open(parts_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "part", "x", "y", "visible"])
        for line in (root / "parts" / "part_locs.txt").read_text().splitlines():
            if not line.strip():
                continue
            iid, pid, x, y, vis = line.split()
            w.writerow([f"images/{images[iid].strip()}", names[pid], x, y, int(float(vis))])
    return parts_path, boxes_path
