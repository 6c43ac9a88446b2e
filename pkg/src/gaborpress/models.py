"""Model constructors and the textual architecture descriptor.

The descriptor is a small line-oriented grammar: a header line with input
shape, class count, dtype, and family, followed by one line per layer.
Checkpoints embed it so a model can be rebuilt without external context.
"""

from __future__ import annotations

import numpy as np

from .engine.layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool2d,
    ReLU,
    ResidualBlock,
)
from .data import CIFAR_MEAN, CIFAR_STD
from .engine.model import Model
from .errors import FormatError, StructureError

DESCRIPTOR_VERSION = 1
DEFAULT_NORM = (CIFAR_MEAN, CIFAR_STD)


def toy_model(num_classes: int = 4, width: int = 8, image_size: int = 32, dtype=np.float32) -> Model:
    """conv 7x7 -> conv 5x5 -> maxpool -> dense; the desk-scale subject."""
    half = image_size // 2
    layers = [
        Conv2d(3, width, 7, pad=3, dtype=dtype),
        ReLU(),
        Conv2d(width, width, 5, pad=2, dtype=dtype),
        ReLU(),
        MaxPool2d(2),
        Dense(width * half * half, num_classes, dtype=dtype),
    ]
    m = Model(layers, (3, image_size, image_size), num_classes, dtype=dtype)
    m.family = "toy"
    return m


def vgg_style(
    num_classes: int = 10,
    plan: tuple = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)),
    image_size: int = 32,
    dtype=np.float32,
) -> Model:
    """VGG-16-shaped chain: conv3x3-bn-relu stacks with maxpool between stages."""
    layers = []
    c_in = 3
    size = image_size
    for width, reps in plan:
        for _ in range(reps):
            layers += [
                Conv2d(c_in, width, 3, pad=1, bias=False, dtype=dtype),
                BatchNorm2d(width, dtype=dtype),
                ReLU(),
            ]
            c_in = width
        layers.append(MaxPool2d(2))
        size //= 2
    layers += [GlobalAvgPool(), Dense(c_in, num_classes, dtype=dtype)]
    m = Model(layers, (3, image_size, image_size), num_classes, dtype=dtype)
    m.family = "vgg-style"
    return m


def resnet_style(
    num_classes: int = 10,
    blocks_per_stage: int = 3,
    base_width: int = 16,
    image_size: int = 32,
    dtype=np.float32,
) -> Model:
    """ResNet-20-shaped network (blocks_per_stage=3, base_width=16 is ResNet-20)."""
    layers = [
        Conv2d(3, base_width, 3, pad=1, bias=False, dtype=dtype),
        BatchNorm2d(base_width, dtype=dtype),
        ReLU(),
    ]
    c_in = base_width
    for stage, width in enumerate((base_width, base_width * 2, base_width * 4)):
        for b in range(blocks_per_stage):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append(ResidualBlock(c_in, width, stride=stride, dtype=dtype))
            c_in = width
    layers += [GlobalAvgPool(), Dense(c_in, num_classes, dtype=dtype)]
    m = Model(layers, (3, image_size, image_size), num_classes, dtype=dtype)
    m.family = "resnet-style"
    return m


def init_model(model: Model, rng: np.random.Generator) -> Model:
    """He-init every standard conv/dense layer, in layer order."""
    for layer in model.layers:
        if hasattr(layer, "init_he"):
            layer.init_he(rng)
    return model


def build_model(family: str, num_classes: int, dtype=np.float32, **kw) -> Model:
    if family == "toy":
        return toy_model(num_classes=num_classes, dtype=dtype, **kw)
    if family == "vgg-style":
        return vgg_style(num_classes=num_classes, dtype=dtype, **kw)
    if family == "resnet-style":
        return resnet_style(num_classes=num_classes, dtype=dtype, **kw)
    raise StructureError(f"unknown model family {family!r}")


def model_descriptor(model: Model) -> str:
    c, h, w = model.input_shape
    family = getattr(model, "family", "custom")
    mean, std = getattr(model, "norm", DEFAULT_NORM)
    head = (
        f"gaborpress-arch v{DESCRIPTOR_VERSION} input={c}x{h}x{w} "
        f"classes={model.num_classes} dtype={model.dtype.name} family={family}"
    )
    norm = (
        f"norm mean={','.join(repr(float(v)) for v in mean)} "
        f"std={','.join(repr(float(v)) for v in std)}"
    )
    return "\n".join([head, norm] + model.descriptor_lines())


def _kv(tokens: list[str]) -> dict:
    out = {}
    for t in tokens:
        if "=" not in t:
            raise FormatError(f"bad descriptor token {t!r}")
        k, v = t.split("=", 1)
        out[k] = v
    return out


def model_from_descriptor(text: str) -> Model:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty architecture descriptor")
    head = lines[0].split()
    if len(head) < 2 or head[0] != "gaborpress-arch" or head[1] != f"v{DESCRIPTOR_VERSION}":
        raise FormatError(f"unsupported architecture descriptor header {lines[0]!r}")
    kv = _kv(head[2:])
    c, h, w = (int(v) for v in kv["input"].split("x"))
    num_classes = int(kv["classes"])
    dtype = np.dtype(kv["dtype"])
    norm = DEFAULT_NORM
    body = lines[1:]
    if body and body[0].startswith("norm "):
        nkv = _kv(body[0].split()[1:])
        norm = (
            tuple(float(v) for v in nkv["mean"].split(",")),
            tuple(float(v) for v in nkv["std"].split(",")),
        )
        body = body[1:]

    layers = []
    for ln in body:
        tok = ln.split()
        kind, args = tok[0], _kv(tok[1:])
        if kind == "conv":
            layer = Conv2d(
                int(args["in"]), int(args["out"]), int(args["k"]),
                stride=int(args["stride"]), pad=int(args["pad"]),
                bias=bool(int(args["bias"])), dtype=dtype,
            )
            layer.orig_out = int(args.get("orig_out", args["out"]))
            layer.orig_in = int(args.get("orig_in", args["in"]))
            if args.get("mode", "standard") == "gabor":
                # Placeholder grid; the checkpoint loader overwrites it.
                layer.to_gabor(np.zeros((layer.n_out, layer.n_in, 8)))
            layers.append(layer)
        elif kind == "bn":
            layers.append(BatchNorm2d(int(args["ch"]), momentum=float(args["momentum"]),
                                      eps=float(args["eps"]), dtype=dtype))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool":
            layers.append(MaxPool2d(int(args["size"]), int(args["stride"])))
        elif kind == "gap":
            layers.append(GlobalAvgPool())
        elif kind == "dense":
            layers.append(Dense(int(args["in"]), int(args["out"]), dtype=dtype))
        elif kind == "resblock":
            layers.append(ResidualBlock(int(args["in"]), int(args["out"]),
                                        stride=int(args["stride"]), dtype=dtype))
        else:
            raise FormatError(f"unknown layer kind {kind!r} in descriptor")
    model = Model(layers, (c, h, w), num_classes, dtype=dtype)
    model.family = kv.get("family", "custom")
    model.norm = norm
    return model
