"""Layers of the minimal deterministic CNN engine.

All activations and weights are dense numpy arrays in N x C x H x W order.
Every layer caches what its backward pass needs on `self`; backward returns
the input gradient and accumulates parameter gradients into Parameter.grad.

Convolution is im2col + one matmul.  A Conv2d either owns a free weight
tensor ("standard" mode) or an (n_out, n_in, 8) float64 grid of Gabor
parameters ("gabor" mode) from which weights are synthesized once per
forward pass; the synthesized weights are retained so the backward pass
chains weight gradients into per-kernel parameter gradients.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from ..gabor import param_grad_bank, synth_bank


class Parameter:
    """A trainable array plus its gradient accumulator.

    kind "tensor" gets full weight decay; kind "gabor" holds (n_out, n_in, 8)
    Gabor parameters in float64 and decays only the amplitude entry.
    """

    def __init__(self, data: np.ndarray, kind: str = "tensor"):
        self.data = data
        self.grad = np.zeros_like(data)
        self.kind = kind

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N*out_h*out_w, C*k*k) patch matrix."""
    n, c, h, w = x.shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((n, c, k, k, out_h, out_w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = x[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, c * k * k)


def col2im(
    dcol: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch gradients back to (N, C, H, W)."""
    n, c, h, w = x_shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    col = dcol.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += col[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


class Layer:
    def params(self) -> list[tuple[str, Parameter]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def masks(self) -> list[tuple[str, np.ndarray]]:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> str:
        raise NotImplementedError


class Conv2d(Layer):
    STANDARD = "standard"
    GABOR = "gabor"

    def __init__(
        self,
        n_in: int,
        n_out: int,
        k: int,
        stride: int = 1,
        pad: int = 0,
        bias: bool = True,
        dtype=np.float32,
    ):
        self.n_in = n_in
        self.n_out = n_out
        self.k = k
        self.stride = stride
        self.pad = pad
        self.dtype = np.dtype(dtype)
        self.mode = self.STANDARD
        self.weight = Parameter(np.zeros((n_out, n_in, k, k), dtype=self.dtype))
        self.gabor_params: Parameter | None = None
        self.bias = Parameter(np.zeros(n_out, dtype=self.dtype)) if bias else None
        self.kernel_mask = np.ones((n_out, n_in), dtype=bool)
        self.channel_mask = np.ones(n_out, dtype=bool)
        # Original geometry before any structural compaction, for prune accounting.
        self.orig_out = n_out
        self.orig_in = n_in
        self._cache = None

    def init_he(self, rng: np.random.Generator) -> None:
        """He fan-in normal init for standard weights; bias zero."""
        fan_in = self.n_in * self.k * self.k
        std = np.sqrt(2.0 / fan_in)
        self.weight.data = (rng.standard_normal(self.weight.data.shape) * std).astype(self.dtype)
        self.weight.grad = np.zeros_like(self.weight.data)

    def to_gabor(self, params: np.ndarray) -> None:
        """Switch to gabor mode with an (n_out, n_in, 8) float64 parameter grid."""
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_out, self.n_in, 8):
            raise DimensionError(
                f"gabor grid {params.shape} does not match layer ({self.n_out}, {self.n_in}, 8)"
            )
        self.mode = self.GABOR
        self.gabor_params = Parameter(params.copy(), kind="gabor")
        self.weight = Parameter(self.synthesize())

    def to_standard(self) -> None:
        """Freeze the synthesized weights and train them as a free tensor again."""
        if self.mode == self.GABOR:
            self.weight = Parameter(self.synthesize())
            self.gabor_params = None
            self.mode = self.STANDARD

    def synthesize(self) -> np.ndarray:
        return synth_bank(self.gabor_params.data, self.k).astype(self.dtype)

    def effective_weights(self) -> np.ndarray:
        """Current weights with pruned kernels/channels zeroed out."""
        w = self.synthesize() if self.mode == self.GABOR else self.weight.data
        mask = self.kernel_mask & self.channel_mask[:, None]
        if mask.all():
            return w
        return w * mask[:, :, None, None].astype(w.dtype)

    def out_shape(self, in_shape: tuple) -> tuple:
        c, h, w = in_shape
        if c != self.n_in:
            raise DimensionError(f"conv expects {self.n_in} input channels, got {c}")
        oh = (h + 2 * self.pad - self.k) // self.stride + 1
        ow = (w + 2 * self.pad - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"conv output collapsed: input {in_shape}, k={self.k}")
        return (self.n_out, oh, ow)

    def params(self):
        out = []
        if self.mode == self.GABOR:
            out.append(("gabor_params", self.gabor_params))
        else:
            out.append(("weight", self.weight))
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def masks(self):
        return [("kernel_mask", self.kernel_mask), ("channel_mask", self.channel_mask)]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.n_in:
            raise DimensionError(
                f"conv input {x.shape} incompatible with ({self.n_in} channels expected)"
            )
        n, _, h, w = x.shape
        oh = (h + 2 * self.pad - self.k) // self.stride + 1
        ow = (w + 2 * self.pad - self.k) // self.stride + 1
        w_eff = self.effective_weights()
        col = im2col(x, self.k, self.stride, self.pad)
        out = col @ w_eff.reshape(self.n_out, self.n_in * self.k * self.k).T
        if self.bias is not None:
            b = self.bias.data * self.channel_mask.astype(self.dtype)
            out += b
        self._cache = (x.shape, col, w_eff)
        return out.reshape(n, oh, ow, self.n_out).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, col, w_eff = self._cache
        n_out = self.n_out
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, n_out)
        dw = (dflat.T @ col).reshape(w_eff.shape)
        mask = (self.kernel_mask & self.channel_mask[:, None]).astype(dw.dtype)
        dw *= mask[:, :, None, None]
        if self.bias is not None:
            self.bias.grad += dflat.sum(axis=0) * self.channel_mask.astype(dw.dtype)
        if self.mode == self.GABOR:
            self.gabor_params.grad += param_grad_bank(
                self.gabor_params.data, self.k, dw.astype(np.float64)
            )
        else:
            self.weight.grad += dw
        dcol = dflat @ w_eff.reshape(n_out, self.n_in * self.k * self.k)
        return col2im(dcol, x_shape, self.k, self.stride, self.pad)

    def descriptor(self) -> str:
        parts = [
            f"conv in={self.n_in} out={self.n_out} k={self.k} stride={self.stride}",
            f"pad={self.pad} bias={int(self.bias is not None)} mode={self.mode}",
            f"orig_out={self.orig_out} orig_in={self.orig_in}",
        ]
        return " ".join(parts)


class BatchNorm2d(Layer):
    def __init__(self, n_ch: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.n_ch = n_ch
        self.momentum = momentum
        self.eps = eps
        self.dtype = np.dtype(dtype)
        self.gamma = Parameter(np.ones(n_ch, dtype=self.dtype))
        self.beta = Parameter(np.zeros(n_ch, dtype=self.dtype))
        self.running_mean = np.zeros(n_ch, dtype=self.dtype)
        self.running_var = np.ones(n_ch, dtype=self.dtype)
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.shape[1] != self.n_ch:
            raise DimensionError(f"batchnorm expects {self.n_ch} channels, got {x.shape[1]}")
        if training:
            m = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            cnt = x.shape[0] * x.shape[2] * x.shape[3]
            # Running stats use the unbiased variance, normalization the biased one.
            unbiased = var * cnt / max(cnt - 1, 1)
            self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * m).astype(self.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(self.dtype)
        else:
            m = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - m[:, None, None]) * inv_std[:, None, None]
        out = self.gamma.data[:, None, None] * xhat + self.beta.data[:, None, None]
        self._cache = (xhat, inv_std, training)
        return out.astype(x.dtype, copy=False)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        g = self.gamma.data[:, None, None]
        if not training:
            return dout * g * inv_std[:, None, None]
        n = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dxhat = dout * g
        # d/dx of batch normalization with batch statistics.
        dx = (
            dxhat
            - dxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        ) * inv_std[:, None, None]
        return dx

    def descriptor(self) -> str:
        return f"bn ch={self.n_ch} momentum={self.momentum!r} eps={self.eps!r}"


class ReLU(Layer):
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask

    def descriptor(self) -> str:
        return "relu"


class MaxPool2d(Layer):
    def __init__(self, size: int, stride: int | None = None):
        self.size = size
        self.stride = stride if stride is not None else size

    def out_shape(self, in_shape: tuple) -> tuple:
        c, h, w = in_shape
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        k, s = self.size, self.stride
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        windows = np.empty((n, c, oh, ow, k * k), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                windows[..., i * k + j] = x[:, :, i : i + s * oh : s, j : j + s * ow : s]
        # First occurrence wins on ties, which keeps pooling deterministic.
        self._argmax = windows.argmax(axis=-1)
        self._x_shape = x.shape
        return windows.max(axis=-1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._x_shape
        k, s = self.size, self.stride
        oh, ow = dout.shape[2], dout.shape[3]
        dx = np.zeros(self._x_shape, dtype=dout.dtype)
        ii, jj = np.divmod(self._argmax, k)
        ni, ci, oi, oj = np.indices(dout.shape)
        np.add.at(dx, (ni, ci, oi * s + ii, oj * s + jj), dout)
        return dx

    def descriptor(self) -> str:
        return f"maxpool size={self.size} stride={self.stride}"


class GlobalAvgPool(Layer):
    def out_shape(self, in_shape: tuple) -> tuple:
        return (in_shape[0], 1, 1)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._x_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._x_shape
        return np.broadcast_to(dout / (h * w), self._x_shape).astype(dout.dtype, copy=True)

    def descriptor(self) -> str:
        return "gap"


class Dense(Layer):
    """Fully connected layer; flattens (N, C, H, W) input internally."""

    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        self.n_in = n_in
        self.n_out = n_out
        self.dtype = np.dtype(dtype)
        self.weight = Parameter(np.zeros((n_out, n_in), dtype=self.dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=self.dtype))

    def init_he(self, rng: np.random.Generator) -> None:
        std = np.sqrt(2.0 / self.n_in)
        self.weight.data = (rng.standard_normal((self.n_out, self.n_in)) * std).astype(self.dtype)
        self.weight.grad = np.zeros_like(self.weight.data)

    def out_shape(self, in_shape: tuple) -> tuple:
        flat = int(np.prod(in_shape))
        if flat != self.n_in:
            raise DimensionError(f"dense expects {self.n_in} inputs, got {in_shape} = {flat}")
        return (self.n_out,)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._in_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise DimensionError(f"dense expects {self.n_in} inputs, got {flat.shape[1]}")
        self._flat = flat
        return flat @ self.weight.data.T + self.bias.data

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.weight.grad += dout.T @ self._flat
        self.bias.grad += dout.sum(axis=0)
        return (dout @ self.weight.data).reshape(self._in_shape)

    def descriptor(self) -> str:
        return f"dense in={self.n_in} out={self.n_out}"


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus an identity / zero-padded shortcut, then relu."""

    def __init__(self, n_in: int, n_out: int, stride: int = 1, dtype=np.float32):
        self.n_in = n_in
        self.n_out = n_out
        self.stride = stride
        self.conv1 = Conv2d(n_in, n_out, 3, stride=stride, pad=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(n_out, dtype=dtype)
        self.conv2 = Conv2d(n_out, n_out, 3, stride=1, pad=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(n_out, dtype=dtype)
        self.relu1 = ReLU()
        self.projecting = stride != 1 or n_in != n_out

    def init_he(self, rng: np.random.Generator) -> None:
        self.conv1.init_he(rng)
        self.conv2.init_he(rng)

    def _subs(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]

    def params(self):
        out = []
        for prefix, sub in self._subs():
            out.extend((f"{prefix}.{n}", p) for n, p in sub.params())
        return out

    def buffers(self):
        out = []
        for prefix, sub in self._subs():
            out.extend((f"{prefix}.{n}", b) for n, b in sub.buffers())
        return out

    def masks(self):
        out = []
        for prefix, sub in self._subs():
            out.extend((f"{prefix}.{n}", m) for n, m in sub.masks())
        return out

    def out_shape(self, in_shape: tuple) -> tuple:
        return self.bn2.out_shape(self.conv2.out_shape(self.bn1.out_shape(self.conv1.out_shape(in_shape))))

    def _shortcut(self, x: np.ndarray) -> np.ndarray:
        if not self.projecting:
            return x
        # Option-A shortcut: spatial subsample plus zero channel padding.
        s = x[:, :, :: self.stride, :: self.stride]
        extra = self.n_out - self.n_in
        if extra < 0:
            raise DimensionError("residual shortcut cannot reduce channel count")
        return np.pad(s, ((0, 0), (0, extra), (0, 0), (0, 0)))

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, training), training), training)
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        out = h + self._shortcut(x)
        self._post_mask = out > 0
        return out * self._post_mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dsum = dout * self._post_mask
        dh = self.conv2.backward(self.bn2.backward(dsum))
        dx = self.conv1.backward(self.bn1.backward(self.relu1.backward(dh)))
        if not self.projecting:
            return dx + dsum
        dshort = dsum[:, : self.n_in]
        dx[:, :, :: self.stride, :: self.stride] += dshort
        return dx

    def descriptor(self) -> str:
        return f"resblock in={self.n_in} out={self.n_out} stride={self.stride}"
