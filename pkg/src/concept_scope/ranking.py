"""Concept output spaces, class-aware rankings and occlusion importance scores.

A concept output space is the logit matrix of a fixed image set under a
channel ablation. Ranking its class-c column and watching how far one image
moves when a patch of it is occluded gives the class-aware order
correlation (CaOC) importance of that patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .backend import ChannelMask
from .cache import CachedModel
from .io import write_json, write_matrix_csv
from .patching import PatchCoord, occlude


@dataclass
class ConceptOutputSpace:
    class_index: int
    concept: int | str
    image_ids: list[Hashable]
    logits: np.ndarray  # n_images x num_classes

    def __post_init__(self):
        self.logits = np.asarray(self.logits)
        if self.logits.ndim != 2 or len(self.logits) != len(self.image_ids):
            raise ValueError("logit rows must align with image ids")

    def row(self, image_id: Hashable) -> int:
        return self.image_ids.index(image_id)


@dataclass
class RankSequence:
    """Image ids ordered from highest to lowest class score."""

    order: list[Hashable]
    positions: dict[Hashable, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.positions = {img: p for p, img in enumerate(self.order)}
        if len(self.positions) != len(self.order):
            raise ValueError("rank sequence contains duplicate ids")

    def position(self, image_id: Hashable) -> int:
        return self.positions[image_id]

    def __len__(self) -> int:
        return len(self.order)


def descending_order(values: Sequence[float]) -> np.ndarray:
    """Indices sorting ``values`` high to low; equal values keep ascending index."""
    return np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")


def rank(space: ConceptOutputSpace, c: int | None = None) -> RankSequence:
    c = space.class_index if c is None else c
    if not 0 <= c < space.logits.shape[1]:
        raise ValueError(f"class {c} out of range")
    return RankSequence([space.image_ids[i] for i in descending_order(space.logits[:, c])])


def position_after_replacement(column: np.ndarray, j: int, new_value: float) -> int:
    """0-based rank of row ``j`` once its value is replaced by ``new_value``.

    Equivalent to re-sorting the whole column with the tie rule of
    :func:`descending_order`, without the sort.
    """
    column = np.asarray(column, dtype=np.float64)
    new_value = float(new_value)
    idx = np.arange(len(column))
    ahead = (column > new_value) | ((column == new_value) & (idx < j))
    ahead[j] = False
    return int(ahead.sum())


def build_concept_space(
    model: CachedModel,
    images: Sequence[np.ndarray],
    image_ids: Sequence[Hashable],
    class_index: int,
    concept: int | str = "all",
    channels: Sequence[int] | None = None,
    keys: Sequence[Hashable] | None = None,
) -> ConceptOutputSpace:
    """Logits of every image under ablation to ``channels`` (None keeps all).

    ``images`` may be arrays or zero-argument loaders.
    """
    mask = None if channels is None else ChannelMask.of(channels, model.num_channels)
    loaded = [im() if callable(im) else im for im in images] if keys is None else _Lazy(images)
    logits = model.logits(loaded, mask, keys)
    return ConceptOutputSpace(class_index, concept, list(image_ids), logits)


class _Lazy(Sequence):
    """Sequence that calls loaders on access; lets the cache skip image decoding."""

    def __init__(self, items):
        self.items = list(items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        item = self.items[i]
        return item() if callable(item) else item


def occluded_rank(
    space: ConceptOutputSpace,
    image_id: Hashable,
    new_logits: np.ndarray,
    c: int | None = None,
) -> tuple[RankSequence, int]:
    """Replace one image's logits by its occluded version and re-rank.

    Returns the new sequence and the occluded image's new 0-based position.
    """
    c = space.class_index if c is None else c
    j = space.row(image_id)
    column = space.logits[:, c].astype(np.float64).copy()
    column[j] = float(np.asarray(new_logits)[c])
    seq = RankSequence([space.image_ids[i] for i in descending_order(column)])
    return seq, seq.position(image_id)


def occlusion_logits(
    model: CachedModel,
    image: np.ndarray,
    patch: PatchCoord,
    patch_size: int,
    channels: Sequence[int] | None = None,
    key: Hashable | None = None,
) -> np.ndarray:
    mask = None if channels is None else ChannelMask.of(channels, model.num_channels)
    keys = None if key is None else [(key, "occ", patch_size, tuple(patch))]
    return model.logits([occlude(image, patch, patch_size)], mask, keys)[0]


def caoc_positional(init_pos: int, new_pos: int) -> int:
    return abs(int(init_pos) - int(new_pos))


def caoc_kendall(seq: RankSequence | Sequence, seq2: RankSequence | Sequence) -> float:
    """Kendall tau-a between two orderings of the same ids."""
    a = seq.order if isinstance(seq, RankSequence) else list(seq)
    b = seq2 if isinstance(seq2, RankSequence) else RankSequence(list(seq2))
    n = len(a)
    if n < 2:
        raise ValueError("Kendall tau needs at least 2 items")
    if set(a) != set(b.order) or len(b) != n:
        raise ValueError("sequences must rank the same ids")
    # positions in the second ranking, listed in the first ranking's order
    p = np.asarray([b.position(x) for x in a])
    discordant = int(np.triu(p[:, None] > p[None, :], k=1).sum())
    return 1.0 - 2.0 * discordant / (n * (n - 1) / 2)


def pd_importance(logits: np.ndarray, logits2: np.ndarray, c: int) -> float:
    """Absolute change of the class-c logit."""
    logits, logits2 = np.asarray(logits), np.asarray(logits2)
    if logits.shape != logits2.shape:
        raise ValueError("logit vectors differ in length")
    return abs(float(logits[c]) - float(logits2[c]))


def pd_plane_distance(logits: np.ndarray, logits2: np.ndarray) -> float:
    """Euclidean distance in the full logit space (diagnostic only)."""
    return float(np.linalg.norm(np.asarray(logits, np.float64) - np.asarray(logits2, np.float64)))


def channel_l1(model: CachedModel, images: Sequence, keys: Sequence[Hashable] | None = None) -> np.ndarray:
    """Per-image, per-channel L1 of the full feature maps: n_images x C."""
    rows = []
    for i, im in enumerate(images):
        def compute(im=im):
            feats = model.features([im() if callable(im) else im])[0]
            return np.abs(feats.astype(np.float64)).sum(axis=(1, 2))

        if keys is None:
            rows.append(compute())
        else:
            rows.append(model.cached_array(("channel_l1", keys[i]), compute))
    return np.stack(rows) if rows else np.zeros((0, model.num_channels))


def top_activated_images(l1: np.ndarray, channels: Sequence[int], n: int, image_ids: Sequence[Hashable] | None = None) -> list:
    """The ``n`` images with the largest summed L1 over the concept's channels."""
    l1 = np.asarray(l1)
    if n > len(l1):
        raise ValueError(f"N={n} exceeds the {len(l1)} available images")
    score = l1[:, list(channels)].sum(axis=1)
    order = descending_order(score)[:n]
    ids = list(range(len(l1))) if image_ids is None else list(image_ids)
    return [ids[i] for i in order]


def export_ranking(path: str | Path, space: ConceptOutputSpace, seq: RankSequence) -> Path:
    """Ranking JSON plus the logit matrix as a CSV next to it."""
    path = Path(path)
    logits_file = path.with_name(path.stem + "_logits.csv")
    write_matrix_csv(logits_file, space.logits)
    return write_json(path, {
        "class": space.class_index,
        "concept": space.concept,
        "order": [str(i) for i in seq.order],
        "logits_file": logits_file.name,
    })
