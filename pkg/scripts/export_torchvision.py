"""Split a torchvision VGG16 / ResNet-18 at its last conv block and export both halves to ONNX.

    python scripts/export_torchvision.py vgg16 out/vgg --classes cat dog
    python scripts/export_torchvision.py resnet18 out/resnet --weights DEFAULT

Without --weights the network is randomly initialised (useful for shape
checks). The head is rebuilt for the requested classes, so a fine-tuned
state dict can be loaded with --state-dict.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch
import torchvision
from torch import nn

from concept_scope.toymodels import write_descriptor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def split(arch: str, num_classes: int, weights=None, light_head: bool = False) -> tuple[nn.Module, nn.Module]:
    net = getattr(torchvision.models, arch)(weights=weights)
    if arch.startswith("vgg"):
        encoder = net.features  # ends with the last conv block's ReLU + max-pool
        if light_head:
            head = nn.Sequential(nn.Flatten(), nn.Linear(512 * 7 * 7, num_classes))
        else:
            net.classifier[-1] = nn.Linear(net.classifier[-1].in_features, num_classes)
            head = nn.Sequential(net.avgpool, nn.Flatten(), net.classifier)
    elif arch.startswith("resnet"):
        encoder = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4)
        net.fc = nn.Linear(net.fc.in_features, num_classes)
        head = nn.Sequential(net.avgpool, nn.Flatten(), net.fc)
    else:
        raise ValueError(f"unsupported architecture {arch!r}")
    return encoder.eval(), head.eval()


def export(
    arch: str,
    out_dir: str | Path,
    classes: list[str],
    weights=None,
    state_dict: str | None = None,
    input_size: int = 224,
    light_head: bool = False,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder, head = split(arch, len(classes), weights, light_head)
    if state_dict:
        nn.Sequential(encoder, head).load_state_dict(torch.load(state_dict, map_location="cpu"))
    x = torch.zeros(1, 3, input_size, input_size)
    with torch.no_grad():
        feats = encoder(x)
    enc_path, head_path = out_dir / "encoder.onnx", out_dir / "head.onnx"
    torch.onnx.export(encoder, x, enc_path, input_names=["image"], output_names=["features"],
                      dynamic_axes={"image": {0: "N"}, "features": {0: "N"}}, opset_version=17, dynamo=False)
    torch.onnx.export(head, feats, head_path, input_names=["features"], output_names=["logits"],
                      dynamic_axes={"features": {0: "N"}, "logits": {0: "N"}}, opset_version=17, dynamo=False)
    return write_descriptor(out_dir / "model.json", enc_path, head_path, input_size,
                            tuple(feats.shape[1:]), classes, IMAGENET_MEAN, IMAGENET_STD)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("arch", choices=("vgg16", "resnet18"))
    p.add_argument("out_dir", type=Path)
    p.add_argument("--classes", nargs="+", default=["cat", "dog"])
    p.add_argument("--weights", default=None, help="torchvision weights name, e.g. DEFAULT")
    p.add_argument("--state-dict", default=None, help="fine-tuned encoder+head state dict")
    p.add_argument("--input-size", type=int, default=224)
    args = p.parse_args(argv)
    path = export(args.arch, args.out_dir, args.classes, args.weights, args.state_dict, args.input_size)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
