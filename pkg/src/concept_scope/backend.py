"""Split-model inference on ONNX graphs.

A model is handed over as two graphs cut at the last convolutional layer:
an encoder (image -> C x Hf x Wf feature tensor) and a head (feature tensor
-> pre-softmax logits). Concept ablation is a plain tensor edit between the
two graphs, so no framework hooks are needed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import onnxruntime as ort
from PIL import Image


class ModelLoadError(RuntimeError):
    pass


class ShapeMismatchError(ModelLoadError):
    pass


class InferenceError(RuntimeError):
    """Raised when a forward pass fails; carries the failing batch index."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class ChannelMask:
    """Channels kept before the head; every other channel is zeroed."""

    keep: frozenset[int]

    @classmethod
    def all(cls, num_channels: int) -> "ChannelMask":
        return cls(frozenset(range(num_channels)))

    @classmethod
    def of(cls, channels: Iterable[int], num_channels: int | None = None) -> "ChannelMask":
        channels = [int(c) for c in channels]
        if len(set(channels)) != len(channels):
            raise ValueError("duplicate channel indices in mask")
        if num_channels is not None:
            bad = [c for c in channels if not 0 <= c < num_channels]
            if bad:
                raise ValueError(f"channel indices out of range [0, {num_channels}): {bad}")
        return cls(frozenset(channels))

    def vector(self, num_channels: int) -> np.ndarray:
        bad = [c for c in self.keep if not 0 <= c < num_channels]
        if bad:
            raise ValueError(f"channel indices out of range [0, {num_channels}): {sorted(bad)}")
        v = np.zeros(num_channels, dtype=np.float32)
        v[sorted(self.keep)] = 1.0
        return v

    def digest(self) -> str:
        return hashlib.sha256(",".join(map(str, sorted(self.keep))).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ModelBundle:
    encoder_path: Path
    head_path: Path
    input_size: int
    channel_means: tuple[float, float, float]
    channel_stds: tuple[float, float, float]
    feature_shape: tuple[int, int, int]
    class_names: tuple[str, ...]
    encoder: ort.InferenceSession = field(repr=False)
    head: ort.InferenceSession = field(repr=False)
    digest: str = ""

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_channels(self) -> int:
        return self.feature_shape[0]

    def class_index(self, name: str | int) -> int:
        if isinstance(name, int) or (isinstance(name, str) and name.isdigit() and name not in self.class_names):
            idx = int(name)
            if not 0 <= idx < self.num_classes:
                raise ValueError(f"class index {idx} out of range")
            return idx
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValueError(f"unknown class {name!r}; known: {list(self.class_names)}") from None


def _session(path: Path) -> ort.InferenceSession:
    opts = ort.SessionOptions()
    opts.log_severity_level = 3
    return ort.InferenceSession(str(path), sess_options=opts, providers=["CPUExecutionProvider"])


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_model_bundle(descriptor_file: str | Path) -> ModelBundle:
    """Load a model descriptor JSON and validate shapes with a dry run on a zero image."""
    descriptor_file = Path(descriptor_file)
    if not descriptor_file.is_file():
        raise ModelLoadError(f"model file not found: {descriptor_file}")
    desc = json.loads(descriptor_file.read_text())
    missing = [k for k in ("encoder", "head", "input_size", "means", "stds", "feature_shape", "classes") if k not in desc]
    if missing:
        raise ModelLoadError(f"model descriptor missing keys: {missing}")

    base = descriptor_file.parent
    enc_path = (base / desc["encoder"]).resolve()
    head_path = (base / desc["head"]).resolve()
    for p in (enc_path, head_path):
        if not p.is_file():
            raise ModelLoadError(f"model file not found: {p}")

    classes = tuple(str(c) for c in desc["classes"])
    if len(classes) < 2:
        raise ModelLoadError("a classifier needs at least 2 classes")
    feature_shape = tuple(int(v) for v in desc["feature_shape"])
    if len(feature_shape) != 3:
        raise ModelLoadError("feature_shape must be [C, Hf, Wf]")

    h = hashlib.sha256()
    h.update(json.dumps(desc, sort_keys=True).encode())
    h.update(_file_digest(enc_path).encode())
    h.update(_file_digest(head_path).encode())
    # backend upgrades invalidate cached logits
    h.update(ort.__version__.encode())

    bundle = ModelBundle(
        encoder_path=enc_path,
        head_path=head_path,
        input_size=int(desc["input_size"]),
        channel_means=tuple(float(v) for v in desc["means"]),
        channel_stds=tuple(float(v) for v in desc["stds"]),
        feature_shape=feature_shape,
        class_names=classes,
        encoder=_session(enc_path),
        head=_session(head_path),
        digest=h.hexdigest(),
    )

    zero = np.zeros((1, 3, bundle.input_size, bundle.input_size), dtype=np.float32)
    feats = _run(bundle.encoder, zero)
    if tuple(feats.shape[1:]) != feature_shape:
        raise ShapeMismatchError(
            f"shape mismatch: declared feature_shape {list(feature_shape)}, encoder emits {list(feats.shape[1:])}"
        )
    logits = _run(bundle.head, feats)
    if logits.ndim != 2 or logits.shape[1] != len(classes):
        raise ShapeMismatchError(
            f"shape mismatch: {len(classes)} classes declared, head emits {list(logits.shape[1:])}"
        )
    return bundle


def _run(session: ort.InferenceSession, x: np.ndarray) -> np.ndarray:
    name = session.get_inputs()[0].name
    return session.run(None, {name: np.ascontiguousarray(x, dtype=np.float32)})[0]


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Read an image as an H x W x 3 uint8 array, optionally resized to size x size."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image: np.ndarray, bundle: ModelBundle, resize: bool = True) -> np.ndarray:
    """Raw H x W x 3 pixels -> normalized 3 x S x S float32 tensor.

    With ``resize=False`` the native spatial size is kept (used for feeding
    single patches to a fully convolutional encoder).
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    s = bundle.input_size
    if resize and image.shape[:2] != (s, s):
        pil = Image.fromarray(np.clip(image, 0, 255).astype(np.uint8))
        image = np.asarray(pil.resize((s, s), Image.BILINEAR))
    x = image.astype(np.float32) / 255.0
    x = (x - np.asarray(bundle.channel_means, dtype=np.float32)) / np.asarray(bundle.channel_stds, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def encode(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    """Feature tensor (C x Hf x Wf) for one preprocessed input."""
    try:
        return _run(bundle.encoder, x[None])[0]
    except Exception as exc:  # onnxruntime raises its own exception hierarchy
        raise InferenceError(f"encoder failed: {exc}") from exc


def head_forward(bundle: ModelBundle, features: np.ndarray, mask: ChannelMask | None = None) -> np.ndarray:
    """Pre-softmax logits of the head after zeroing channels outside ``mask``."""
    return _head_batch(bundle, np.asarray(features, dtype=np.float32)[None], mask)[0]


def _head_batch(bundle: ModelBundle, feats: np.ndarray, mask: ChannelMask | None) -> np.ndarray:
    if tuple(feats.shape[1:]) != bundle.feature_shape:
        raise ValueError(f"feature tensor shape {feats.shape[1:]} != {bundle.feature_shape}")
    if mask is not None:
        feats = feats * mask.vector(bundle.num_channels)[None, :, None, None]
    try:
        return _run(bundle.head, feats)
    except Exception as exc:
        raise InferenceError(f"head failed: {exc}") from exc


def batch_encode(bundle: ModelBundle, inputs: Sequence[np.ndarray] | np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    for start in range(0, len(inputs), batch_size):
        chunk = np.stack([np.asarray(x, dtype=np.float32) for x in inputs[start:start + batch_size]])
        try:
            out.append(_run(bundle.encoder, chunk))
        except Exception as exc:
            raise InferenceError(f"encoder failed on batch starting at item {start}: {exc}", start) from exc
    if not out:
        return np.zeros((0, *bundle.feature_shape), dtype=np.float32)
    return np.concatenate(out)


def batch_forward(
    bundle: ModelBundle,
    inputs: Sequence[np.ndarray] | np.ndarray,
    mask: ChannelMask | None = None,
    batch_size: int = 32,
) -> np.ndarray:
    """Logits for a list of preprocessed inputs, in input order (N x num_classes)."""
    shapes = {tuple(np.shape(x)) for x in inputs}
    if len(shapes) > 1:
        raise ValueError(f"inhomogeneous input shapes: {sorted(shapes)}")
    out = []
    for start in range(0, len(inputs), batch_size):
        feats = batch_encode(bundle, inputs[start:start + batch_size], batch_size)
        try:
            out.append(_head_batch(bundle, feats, mask))
        except InferenceError as exc:
            raise InferenceError(str(exc), start) from exc
    if not out:
        return np.zeros((0, bundle.num_classes), dtype=np.float32)
    return np.concatenate(out)
