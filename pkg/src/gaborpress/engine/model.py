"""Model container: an ordered layer chain with named parameters and a
softmax cross-entropy head."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .layers import Conv2d, Layer, Parameter


class Model:
    def __init__(self, layers: list[Layer], input_shape: tuple, num_classes: int, dtype=np.float32):
        self.layers = layers
        self.input_shape = tuple(input_shape)  # (C, H, W)
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.check_shapes()

    def check_shapes(self) -> tuple:
        """Propagate the declared input shape through every layer."""
        shape = self.input_shape
        self.layer_in_shapes = []
        for layer in self.layers:
            self.layer_in_shapes.append(shape)
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise DimensionError(
                f"model output shape {shape} does not produce {self.num_classes} logits"
            )
        return shape

    def named_params(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{n}", p) for n, p in layer.params())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{n}", b) for n, b in layer.buffers())
        return out

    def named_masks(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{n}", m) for n, m in layer.masks())
        return out

    def param_count(self) -> int:
        """Stored trainable scalars, masks excluded."""
        return sum(p.data.size for _, p in self.named_params())

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv2d)]

    def conv(self, conv_index: int) -> Conv2d:
        """The conv_index-th convolution layer (residual-block internals excluded)."""
        idxs = self.conv_indices()
        if not 0 <= conv_index < len(idxs):
            raise DimensionError(f"model has {len(idxs)} plain conv layers, asked for {conv_index}")
        return self.layers[idxs[conv_index]]

    def descriptor_lines(self) -> list[str]:
        return [layer.descriptor() for layer in self.layers]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. logits."""
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    p = softmax(logits.astype(np.float64))
    eps = 1e-12
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    dlogits = p
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)
