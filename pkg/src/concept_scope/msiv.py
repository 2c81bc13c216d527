"""Multiscale interpretable visualisation: quadtree occlusion with rank-based scores.

Each level halves the patch size inside the patches kept by the previous
level, scores every child patch by how much occluding it moves the image in
the concept's class ranking, and adds the level's min-max normalised score
map to the accumulated importance matrix. Children scoring at least
``delta`` times the level maximum are refined further.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
from PIL import Image

from .backend import ChannelMask
from .io import atomic_write_bytes
from .patching import occlude_box, quadtree_levels
from .ranking import (
    ConceptOutputSpace,
    RankSequence,
    caoc_kendall,
    descending_order,
    position_after_replacement,
)

METRICS = ("caoc", "kendall", "pd")
DELTA_PRESETS = (0.25, 0.5, 0.75, 0.9)

Cell = tuple[int, int]


@dataclass(frozen=True)
class MsivConfig:
    delta: float = 0.9
    min_patch: int | None = None
    metric: str = "caoc"

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    def resolve_min_patch(self, image_size: int) -> int:
        return image_size // 8 if self.min_patch is None else self.min_patch


@dataclass
class LevelRecord:
    level: int
    patch_size: int
    scores: dict[Cell, float]
    threshold: float
    selected: list[Cell]
    contribution: np.ndarray = field(repr=False)


@dataclass
class MsivResult:
    importance: np.ndarray
    levels: list[LevelRecord]
    early_stop_level: int | None
    init_pos: int | None = None

    @property
    def dim(self) -> int:
        return self.importance.shape[0]

    def level_scores(self, level: int) -> np.ndarray:
        """Raw scores of one level on its 2^level x 2^level grid (unevaluated cells 0)."""
        rec = self.levels[level - 1]
        side = 2 ** rec.level
        grid = np.zeros((side, side))
        for (la, lb), s in rec.scores.items():
            grid[la, lb] = s
        return grid


def minmax(grid: np.ndarray) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        return np.zeros_like(grid, dtype=np.float64)
    return (grid - lo) / (hi - lo)


def quadtree_search(
    score: Callable[[list[Cell], int], Sequence[float]],
    image_size: int,
    config: MsivConfig,
) -> MsivResult:
    """Run the level loop with a scoring callback.

    ``score(cells, patch_size)`` returns one non-negative importance per cell;
    cells are 0-based (row, col) indices on the current level's grid.
    """
    min_patch = config.resolve_min_patch(image_size)
    n_levels = quadtree_levels(image_size, min_patch)
    side = 2 ** n_levels
    importance = np.zeros((side, side))
    records: list[LevelRecord] = []
    selected: list[Cell] = [(0, 0)]
    patch = image_size
    early_stop = None
    for level in range(1, n_levels + 1):
        patch //= 2
        u = side // 2 ** level
        children = sorted((2 * lx + a, 2 * ly + b) for lx, ly in selected for a in (0, 1) for b in (0, 1))
        values = [float(v) for v in score(children, patch)]
        if any(v < 0 for v in values):
            raise ValueError("importance scores must be non-negative")
        broadcast = np.zeros((side, side))
        for (la, lb), v in zip(children, values):
            broadcast[la * u:(la + 1) * u, lb * u:(lb + 1) * u] += v
        contribution = minmax(broadcast)
        importance += contribution
        thr = max(values) * config.delta
        selected = [cell for cell, v in zip(children, values) if v >= thr]
        records.append(LevelRecord(level, patch, dict(zip(children, values)), thr, selected, contribution))
        if thr == 0:
            early_stop = level
            break
    return MsivResult(importance, records, early_stop)


def rank_scorer(
    space: ConceptOutputSpace,
    image_id: Hashable,
    metric: str,
    c: int | None = None,
) -> tuple[Callable[[np.ndarray], float], int]:
    """Importance of replacing ``image_id``'s logits by a new vector.

    Returns the scoring function and the image's initial 0-based position.
    """
    c = space.class_index if c is None else c
    j = space.row(image_id)
    column = space.logits[:, c].astype(np.float64)
    base_order = descending_order(column)
    init_pos = int(np.flatnonzero(base_order == j)[0])

    if metric == "caoc":
        def fn(new: np.ndarray) -> float:
            return float(abs(init_pos - position_after_replacement(column, j, new[c])))
    elif metric == "kendall":
        base_seq = RankSequence(list(base_order))

        def fn(new: np.ndarray) -> float:
            col = column.copy()
            col[j] = float(new[c])
            return 1.0 - caoc_kendall(base_seq, list(descending_order(col)))
    elif metric == "pd":
        def fn(new: np.ndarray) -> float:
            return abs(float(new[c]) - float(column[j]))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return fn, init_pos


def msiv_run(
    model,
    space: ConceptOutputSpace,
    image_id: Hashable,
    image: np.ndarray,
    config: MsivConfig,
    channels: Sequence[int] | None = None,
    key: Hashable | None = None,
) -> MsivResult:
    """Accumulated importance matrix of one image for one concept.

    ``space`` is the concept output space of the comparison set (containing
    ``image_id``) computed under the same channel ablation; its ranking is
    fixed once, and each occlusion costs one forward pass of the target
    image only.
    """
    image = np.asarray(image)
    size = model.bundle.input_size
    if image.shape[:2] != (size, size):
        raise ValueError(f"image must be {size}x{size}, got {image.shape[:2]}")
    mask = None if channels is None else ChannelMask.of(channels, model.bundle.num_channels)
    fn, init_pos = rank_scorer(space, image_id, config.metric)

    def score(cells: list[Cell], patch: int) -> list[float]:
        occluded = [occlude_box(image, la * patch, lb * patch, patch) for la, lb in cells]
        keys = None if key is None else [(key, "box", la * patch, lb * patch, patch) for la, lb in cells]
        logits = model.logits(occluded, mask, keys)
        return [fn(row) for row in logits]

    result = quadtree_search(score, size, config)
    result.init_pos = init_pos
    return result


def upsample(m: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour upsampling of a square grid to ``size`` x ``size``."""
    m = np.asarray(m, dtype=np.float64)
    if size % m.shape[0] or size % m.shape[1]:
        raise ValueError(f"grid {m.shape} does not divide image size {size}")
    return np.repeat(np.repeat(m, size // m.shape[0], axis=0), size // m.shape[1], axis=1)


def render_overlay(image: np.ndarray, importance: np.ndarray) -> tuple[np.ndarray, bool]:
    """Image multiplied by its normalised importance map.

    Returns ``(overlay, empty)``; ``empty`` flags an all-zero map, which
    yields a black image.
    """
    importance = np.asarray(importance, dtype=np.float64)
    if not np.isfinite(importance).all():
        raise ValueError("importance matrix has non-finite entries")
    hi, lo = float(importance.max()), float(importance.min())
    empty = hi == 0 and lo == 0
    if empty:
        warnings.warn("all-zero importance matrix; overlay is black", RuntimeWarning, stacklevel=2)
        weights = np.zeros_like(importance)
    elif hi == lo:
        weights = np.ones_like(importance)
    else:
        weights = (importance - lo) / (hi - lo)
    image = np.asarray(image)
    w = upsample(weights, image.shape[0])[:, :, None]
    out = np.rint(image.astype(np.float64) * w)
    return np.clip(out, 0, 255).astype(np.uint8), empty


def save_png(path, rgb: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def run_metadata(result: MsivResult, config: MsivConfig, image_size: int, **extra) -> dict:
    return {
        "delta": config.delta,
        "min_patch": config.resolve_min_patch(image_size),
        "min_patch_default": config.min_patch is None,
        "metric": config.metric,
        "image_size": image_size,
        "grid_side": result.dim,
        "levels_run": len(result.levels),
        "early_stop_level": result.early_stop_level,
        "init_pos": result.init_pos,
        "level_log": [
            {
                "level": r.level,
                "patch_size": r.patch_size,
                "threshold": r.threshold,
                "scores": [[la, lb, v] for (la, lb), v in sorted(r.scores.items())],
                "selected": [list(c) for c in r.selected],
            }
            for r in result.levels
        ],
        **extra,
    }
