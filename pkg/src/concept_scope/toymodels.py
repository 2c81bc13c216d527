"""Hand-built ONNX split models whose behaviour is known in closed form.

They back the test-suite oracles and the demo scripts: every activation and
logit they produce can be recomputed by hand from the input pixels.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper
from PIL import Image

OPSET = 17
IR_VERSION = 8


def _save(graph: onnx.GraphProto, path: Path) -> Path:
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", OPSET)])
    model.ir_version = IR_VERSION
    onnx.checker.check_model(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    onnx.save(model, str(path))
    return path


def pooled_encoder(
    path: str | Path,
    color_weights: np.ndarray,
    pool: int,
    input_size: int | None = None,
    spatial_mask: np.ndarray | None = None,
    bias: np.ndarray | None = None,
) -> Path:
    """1x1 conv -> average pool -> (optional spatial mask) -> ReLU.

    ``color_weights`` is C x 3. Without a spatial mask the graph is fully
    convolutional and accepts any input size divisible by ``pool``.
    """
    w = np.asarray(color_weights, dtype=np.float32)
    c = w.shape[0]
    b = np.zeros(c, dtype=np.float32) if bias is None else np.asarray(bias, dtype=np.float32)
    side = input_size if spatial_mask is not None else "H"
    inp = helper.make_tensor_value_info("image", TensorProto.FLOAT, ["N", 3, side, side if spatial_mask is not None else "W"])
    out = helper.make_tensor_value_info("features", TensorProto.FLOAT, ["N", c, "Hf", "Wf"])
    inits = [
        numpy_helper.from_array(w.reshape(c, 3, 1, 1), "conv_w"),
        numpy_helper.from_array(b, "conv_b"),
    ]
    nodes = [
        helper.make_node("Conv", ["image", "conv_w", "conv_b"], ["mixed"]),
        helper.make_node("AveragePool", ["mixed"], ["pooled"], kernel_shape=[pool, pool], strides=[pool, pool]),
    ]
    last = "pooled"
    if spatial_mask is not None:
        inits.append(numpy_helper.from_array(np.asarray(spatial_mask, dtype=np.float32)[None], "spatial_mask"))
        nodes.append(helper.make_node("Mul", ["pooled", "spatial_mask"], ["masked"]))
        last = "masked"
    nodes.append(helper.make_node("Relu", [last], ["features"]))
    return _save(helper.make_graph(nodes, "encoder", [inp], [out], inits), path)


def linear_head(path: str | Path, weight: np.ndarray, bias: np.ndarray) -> Path:
    """logits = flatten(features) @ weight + bias, weight shaped (C*Hf*Wf) x num_classes."""
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    inp = helper.make_tensor_value_info("features", TensorProto.FLOAT, ["N", "C", "Hf", "Wf"])
    out = helper.make_tensor_value_info("logits", TensorProto.FLOAT, ["N", weight.shape[1]])
    nodes = [
        helper.make_node("Flatten", ["features"], ["flat"], axis=1),
        helper.make_node("Gemm", ["flat", "head_w", "head_b"], ["logits"]),
    ]
    inits = [numpy_helper.from_array(weight, "head_w"), numpy_helper.from_array(bias, "head_b")]
    return _save(helper.make_graph(nodes, "head", [inp], [out], inits), path)


def write_descriptor(
    path: str | Path,
    encoder: str | Path,
    head: str | Path,
    input_size: int,
    feature_shape: tuple[int, int, int],
    classes: list[str],
    means=(0.0, 0.0, 0.0),
    stds=(1.0, 1.0, 1.0),
) -> Path:
    path = Path(path)
    desc = {
        "encoder": _relpath(encoder, path.parent),
        "head": _relpath(head, path.parent),
        "input_size": int(input_size),
        "means": list(means),
        "stds": list(stds),
        "feature_shape": list(feature_shape),
        "classes": list(classes),
    }
    path.write_text(json.dumps(desc, indent=2))
    return path


def _relpath(target: str | Path, base: Path) -> str:
    target, base = Path(target).resolve(), base.resolve()
    return str(target.relative_to(base)) if target.is_relative_to(base) else str(target)


GRAY = np.full(3, 1.0 / 3.0, dtype=np.float32)


def quadrant_masks(hf: int) -> np.ndarray:
    """Four hf x hf masks for the TL, TR, BL, BR quadrants (in that order)."""
    h = hf // 2
    m = np.zeros((4, hf, hf), dtype=np.float32)
    m[0, :h, :h] = 1
    m[1, :h, h:] = 1
    m[2, h:, :h] = 1
    m[3, h:, h:] = 1
    return m


def quadrant_model(
    directory: str | Path,
    input_size: int = 32,
    pool: int = 4,
    head_bias: tuple[float, float] = (0.0, 0.0),
) -> Path:
    """The quadrant-detector fixture.

    Encoder: gray intensity (x/255 with mean 0, std 1), 4x average pool, eight
    channels. Channels 0-3 keep only the TL/TR/BL/BR quadrant of the pooled
    map; channels 4-7 are the full pooled map of R, G, B and gray.
    Head: logit_0 = sum(channel 0) + b0, logit_1 = sum(channel 3) + b1.
    Returns the descriptor path.
    """
    directory = Path(directory)
    hf = input_size // pool
    colors = np.stack([GRAY, GRAY, GRAY, GRAY, [1, 0, 0], [0, 1, 0], [0, 0, 1], GRAY]).astype(np.float32)
    spatial = np.ones((8, hf, hf), dtype=np.float32)
    spatial[:4] = quadrant_masks(hf)
    enc = pooled_encoder(directory / "encoder.onnx", colors, pool, input_size=input_size, spatial_mask=spatial)
    weight = np.zeros((8, hf, hf, 2), dtype=np.float32)
    weight[0, :, :, 0] = 1.0
    weight[3, :, :, 1] = 1.0
    head = linear_head(directory / "head.onnx", weight.reshape(-1, 2), np.asarray(head_bias, dtype=np.float32))
    return write_descriptor(directory / "model.json", enc, head, input_size, (8, hf, hf), ["class0", "class1"])


def channel_sum_model(
    directory: str | Path,
    color_weights: np.ndarray,
    input_size: int = 32,
    pool: int = 4,
    num_classes: int = 2,
    head_bias: np.ndarray | None = None,
) -> Path:
    """Fully convolutional encoder with head logit_c = sum(channel c) + bias_c."""
    directory = Path(directory)
    color_weights = np.asarray(color_weights, dtype=np.float32)
    c = color_weights.shape[0]
    hf = input_size // pool
    enc = pooled_encoder(directory / "encoder.onnx", color_weights, pool)
    weight = np.zeros((c, hf, hf, num_classes), dtype=np.float32)
    for k in range(min(c, num_classes)):
        weight[k, :, :, k] = 1.0
    bias = np.zeros(num_classes, dtype=np.float32) if head_bias is None else np.asarray(head_bias, dtype=np.float32)
    head = linear_head(directory / "head.onnx", weight.reshape(-1, num_classes), bias)
    return write_descriptor(
        directory / "model.json", enc, head, input_size, (c, hf, hf), [f"class{i}" for i in range(num_classes)]
    )


def constant_model(directory: str | Path, input_size: int = 32, pool: int = 4, value: float = 0.5) -> Path:
    """Head ignores its input: logits are always (value, -value)."""
    directory = Path(directory)
    hf = input_size // pool
    enc = pooled_encoder(directory / "encoder.onnx", np.tile(GRAY, (4, 1)), pool)
    weight = np.zeros((4 * hf * hf, 2), dtype=np.float32)
    head = linear_head(directory / "head.onnx", weight, np.asarray([value, -value], dtype=np.float32))
    return write_descriptor(directory / "model.json", enc, head, input_size, (4, hf, hf), ["class0", "class1"])


def quadrant_image(size: int, tl: int, br: int = 0, tr: int = 0, bl: int = 0) -> np.ndarray:
    """Gray RGB image with one constant intensity per quadrant."""
    h = size // 2
    img = np.zeros((size, size, 3), dtype=np.uint8)
    img[:h, :h] = tl
    img[:h, h:] = tr
    img[h:, :h] = bl
    img[h:, h:] = br
    return img


# class-0 set: image 0 has the brightest top-left quadrant by a wide margin,
# so blanking that quadrant sends it from first to last place
CLASS0_TL = (255, 20, 40, 60, 80, 100, 120, 140)
CLASS1_BR = (255, 200, 150, 100)


def quadrant_fixture(directory: str | Path, input_size: int = 32) -> dict[str, Path]:
    """Quadrant model + 12-image dataset + manifest + pipeline config on disk."""
    directory = Path(directory)
    model = quadrant_model(directory / "model", input_size=input_size)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, tl in enumerate(CLASS0_TL):
        name = f"images/c0_{i}.png"
        Image.fromarray(quadrant_image(input_size, tl, br=max(tl // 4, 8))).save(directory / name)
        rows.append((name, "class0"))
    for i, br in enumerate(CLASS1_BR):
        name = f"images/c1_{i}.png"
        Image.fromarray(quadrant_image(input_size, 16 * (i + 1), br=br, tr=30 * i)).save(directory / name)
        rows.append((name, "class1"))
    manifest = directory / "manifest.csv"
    manifest.write_text("path,label\n" + "".join(f"{p},{lab}\n" for p, lab in rows))
    config = directory / "config.json"
    config.write_text(json.dumps({
        "schema": 1,
        "model": "model/model.json",
        "manifest": "manifest.csv",
        "out_dir": "artifacts",
        "seed": 0,
        "stages": ["extract", "cluster", "rank", "msiv", "eval"],
        "extract": {"s_p": 8, "t": 2, "mode": "restrict"},
        "cluster": {"k": 2},
        "rank": {"classes": None, "concepts": "all"},
        "msiv": {"images": {"top": 2}, "concepts": "all", "delta": 0.9, "min_patch": None, "metric": "caoc"},
    }, indent=2))
    return {"root": directory, "model": model, "manifest": manifest, "config": config}
