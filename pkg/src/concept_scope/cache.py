"""Content-addressed on-disk array cache and a caching wrapper around a model."""

from __future__ import annotations

import hashlib
import io
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Sequence

import numpy as np

from . import backend
from .backend import ChannelMask, ModelBundle

CACHE_ENV = "CONCEPT_SCOPE_CACHE_DIR"


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "concept_scope"


def key_digest(parts: Sequence[Hashable]) -> str:
    return hashlib.sha256(repr(tuple(parts)).encode()).hexdigest()


class ArrayCache:
    """Maps key tuples to numpy arrays stored as ``.npy`` files.

    Writes go through a temp file and an atomic rename, so a crashed run never
    leaves a half-written entry behind.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else default_cache_dir()
        self.hits = 0
        self.misses = 0

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.npy"

    def get(self, parts: Sequence[Hashable]) -> np.ndarray | None:
        path = self._path(key_digest(parts))
        if not path.is_file():
            self.misses += 1
            return None
        self.hits += 1
        return np.load(path, allow_pickle=False)

    def put(self, parts: Sequence[Hashable], value: np.ndarray) -> None:
        path = self._path(key_digest(parts))
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        np.save(buf, np.asarray(value), allow_pickle=False)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)

    def get_or_compute(self, parts: Sequence[Hashable], fn: Callable[[], np.ndarray]) -> np.ndarray:
        value = self.get(parts)
        if value is None:
            value = np.asarray(fn())
            self.put(parts, value)
        return value

    def clear(self) -> int:
        """Remove every entry; returns the number of files deleted."""
        if not self.root.exists():
            return 0
        n = sum(1 for _ in self.root.rglob("*.npy"))
        shutil.rmtree(self.root)
        return n


@dataclass
class CachedModel:
    """A model bundle plus an optional logit/feature cache.

    Keys passed to :meth:`logits` identify an input image independently of
    its pixels (e.g. ``(manifest_hash, index, occlusion)``); the model digest
    and mask digest are appended here. Without keys or without a cache every
    call goes to the backend.
    """

    bundle: ModelBundle
    cache: ArrayCache | None = None
    batch_size: int = 32
    forward_images: int = field(default=0, init=False)
    encode_images: int = field(default=0, init=False)

    @property
    def num_channels(self) -> int:
        return self.bundle.num_channels

    def mask_for(self, channels) -> ChannelMask | None:
        return None if channels is None else ChannelMask.of(channels, self.bundle.num_channels)

    def logits(
        self,
        images: Sequence[np.ndarray],
        mask: ChannelMask | None = None,
        keys: Sequence[Hashable] | None = None,
    ) -> np.ndarray:
        """Logits (N x num_classes) for raw H x W x 3 images at input size."""
        n = len(images)
        out: list[np.ndarray | None] = [None] * n
        mask_id = "all" if mask is None else mask.digest()
        full = None
        if self.cache is not None and keys is not None:
            full = [("logits", self.bundle.digest, mask_id, k) for k in keys]
            for i, key in enumerate(full):
                out[i] = self.cache.get(key)
        todo = [i for i in range(n) if out[i] is None]
        if todo:
            inputs = [backend.preprocess(images[i], self.bundle) for i in todo]
            fresh = backend.batch_forward(self.bundle, inputs, mask, self.batch_size)
            self.forward_images += len(todo)
            for row, i in zip(fresh, todo):
                out[i] = row
                if full is not None:
                    self.cache.put(full[i], row)
        if n == 0:
            return np.zeros((0, self.bundle.num_classes), dtype=np.float32)
        return np.stack(out)

    def features(self, images: Sequence[np.ndarray], resize: bool = True) -> np.ndarray:
        """Encoder outputs for raw images (uncached)."""
        inputs = [backend.preprocess(im, self.bundle, resize=resize) for im in images]
        self.encode_images += len(inputs)
        return backend.batch_encode(self.bundle, inputs, self.batch_size)

    def cached_array(self, key: Sequence[Hashable], fn: Callable[[], np.ndarray]) -> np.ndarray:
        """Cache any derived array under the model digest."""
        if self.cache is None:
            return np.asarray(fn())
        return self.cache.get_or_compute(("derived", self.bundle.digest, *key), fn)

    @property
    def inference_calls(self) -> int:
        return self.forward_images + self.encode_images
