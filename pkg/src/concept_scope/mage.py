"""Maximal-activation representatives of feature channels.

For every image the grid patch on which a channel reacts most (largest L1
norm of its activation) is located; concatenating the top-t patch
coordinates of every image gives the channel's representative vector.
Channels whose vectors are close fire at the same places across the
dataset and are later clustered into concepts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .cache import CachedModel
from .io import atomic_write_text, dumps_json
from .patching import PatchCoord, PatchGrid, map_patch_to_feature_region

MODES = ("restrict", "patch-forward")


@dataclass(frozen=True)
class MageConfig:
    patch_size: int
    t: int = 5
    mode: str = "restrict"

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("t must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def check_grid(self, image_size: int) -> PatchGrid:
        grid = PatchGrid(image_size, self.patch_size)
        if self.t > len(grid):
            raise ValueError(f"t={self.t} exceeds the {len(grid)} patches per image")
        return grid


@dataclass
class Representative:
    channel: int
    coords: np.ndarray  # 2 * t * n_images grid indices, (lx, ly) pairs

    def __len__(self) -> int:
        return len(self.coords)


def patch_norms(model: CachedModel, image: np.ndarray, config: MageConfig) -> np.ndarray:
    """L1 norm of every channel on every patch, shape C x NbPatches (row-major patches)."""
    size = model.bundle.input_size
    grid = config.check_grid(size)
    coords = grid.coords()
    if config.mode == "restrict":
        feats = model.features([image])[0].astype(np.float64)
        hf, wf = feats.shape[1:]
        out = np.empty((feats.shape[0], len(coords)))
        for p, coord in enumerate(coords):
            rows, cols = map_patch_to_feature_region(coord, config.patch_size, size, (hf, wf))
            out[:, p] = np.abs(feats[:, rows, cols]).sum(axis=(1, 2))
        return out
    crops = []
    for coord in coords:
        rows, cols = grid.pixel_slices(coord)
        crops.append(np.asarray(image)[rows, cols])
    feats = model.features(crops, resize=False).astype(np.float64)
    return np.abs(feats).sum(axis=(2, 3)).T


def top_t_patches(norms_row: Sequence[float], t: int, grid: PatchGrid) -> list[PatchCoord]:
    """The t largest-norm patches, descending; ties go to the lower row-major index."""
    norms_row = np.asarray(norms_row)
    if t > len(norms_row):
        raise ValueError(f"t={t} exceeds the {len(norms_row)} available patches")
    if len(norms_row) != len(grid):
        raise ValueError("norm vector length does not match the grid")
    order = np.argsort(-norms_row, kind="stable")[:t]
    return [grid.coord(int(i)) for i in order]


def top_t_matrix(norms: np.ndarray, t: int, grid: PatchGrid) -> np.ndarray:
    """Vectorised :func:`top_t_patches` over channels: C x 2t integer coords."""
    order = np.argsort(-norms, axis=1, kind="stable")[:, :t]
    lx = order // grid.grid_w + 1
    ly = order % grid.grid_w + 1
    return np.stack([lx, ly], axis=2).reshape(norms.shape[0], 2 * t)


def representatives_from_norms(norm_mats: Iterable[np.ndarray], t: int, grid: PatchGrid) -> list[Representative]:
    """Assemble representatives from per-image C x NbPatches norm matrices, in image order."""
    blocks = [top_t_matrix(np.asarray(n), t, grid) for n in norm_mats]
    if not blocks:
        raise ValueError("no images given")
    mat = np.concatenate(blocks, axis=1)
    return [Representative(nf, mat[nf].copy()) for nf in range(mat.shape[0])]


def build_representatives(
    model: CachedModel,
    images: Sequence[Callable[[], np.ndarray]],
    config: MageConfig,
    keys: Sequence | None = None,
) -> list[Representative]:
    """Representatives for all channels over a dataset.

    ``images`` holds zero-argument loaders so each image is read only when
    its norms are not cached; ``keys`` (one per image) enable caching.
    """
    grid = config.check_grid(model.bundle.input_size)
    mats = []
    for i, load in enumerate(images):
        def compute(load=load):
            return patch_norms(model, load(), config)

        if keys is not None:
            mats.append(model.cached_array(("norms", config.patch_size, config.mode, keys[i]), compute))
        else:
            mats.append(compute())
    return representatives_from_norms(mats, config.t, grid)


def representative_matrix(reps: Sequence[Representative]) -> np.ndarray:
    return np.stack([r.coords for r in reps]).astype(np.float64)


def write_representatives(path: str | Path, reps: Sequence[Representative], sidecar: dict) -> tuple[Path, Path]:
    """CSV ``nf,c0,c1,...`` plus a JSON sidecar next to it."""
    path = Path(path)
    dim = len(reps[0])
    lines = [",".join(["nf"] + [f"c{i}" for i in range(dim)])]
    for r in reps:
        lines.append(",".join([str(r.channel)] + [str(int(v)) for v in r.coords]))
    atomic_write_text(path, "\n".join(lines) + "\n")
    side = path.with_suffix(".json")
    atomic_write_text(side, dumps_json(sidecar))
    return path, side


def read_representatives(path: str | Path) -> tuple[list[Representative], dict]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "nf":
        raise ValueError(f"{path}: not a representatives file")
    reps = [Representative(int(r[0]), np.asarray([int(v) for v in r[1:]], dtype=np.int64)) for r in rows[1:]]
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.is_file() else {}
    return reps, meta


def sidecar(config: MageConfig, manifest_hash: str, nb_images: int) -> dict:
    return {
        "s_p": config.patch_size,
        "t": config.t,
        "mode": config.mode,
        "manifest_hash": manifest_hash,
        "NbIm": nb_images,
        # patch-forward feeds patches at native size to the encoder
        "patch_input": "native" if config.mode == "patch-forward" else "full-image",
    }
