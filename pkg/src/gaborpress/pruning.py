"""L1-ranked greedy pruning of convolution kernels and channels.

Kernels (single k x k slices) or channels (whole output filters) are ranked
by ascending L1 norm and masked one at a time from the minimum; each mask is
kept only while evaluation accuracy stays within a tolerance of the baseline.
Channel pruning also masks the corresponding input kernels of the next
convolution, so the channel's entire influence disappears even when a batch
norm sits in between.  ``compact`` then rebuilds the model with fully masked
channels physically removed.

Layer indices count plain convolution layers in model order (residual-block
internals excluded), matching Model.conv.  Accuracies in reports are percent;
tolerances are absolute percentage points.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .engine.layers import BatchNorm2d, Conv2d, Dense, Parameter, ResidualBlock
from .engine.model import Model
from .engine.train import evaluate
from .errors import IntegrityError, InvalidParameterError, StructureError

KERNEL = "kernel"
CHANNEL = "channel"


@dataclass
class PruneSpec:
    """What to prune and how far accuracy may drop."""

    layer_index: int
    granularity: str
    tolerance: float = 0.2          # percentage points below baseline
    batch_size: int = 128
    stop_on_first_failure: bool = True

    def __post_init__(self):
        if self.granularity not in (KERNEL, CHANNEL):
            raise InvalidParameterError(f"granularity must be kernel or channel, got {self.granularity!r}")
        if self.tolerance < 0:
            raise InvalidParameterError(f"tolerance must be >= 0, got {self.tolerance}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class PruneStep:
    step: int           # 1-based position in the accepted-prune sequence
    index: int          # channel index, or flat kernel index o*n_in + i
    l1_norm: float
    accuracy: float     # percent, measured after this prune


@dataclass
class PruneReport:
    baseline_accuracy: float        # percent
    granularity: str
    layer_index: int
    steps: list = field(default_factory=list)
    pruned: int = 0                 # vs. original geometry, after the run
    total: int = 0

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("step,granularity,layer,index,l1_norm,accuracy\n")
        for s in self.steps:
            out.write(f"{s.step},{self.granularity},{self.layer_index},{s.index},{s.l1_norm!r},{s.accuracy!r}\n")
        return out.getvalue()


def l1_rank(layer: Conv2d, granularity: str) -> list:
    """Unmasked candidate indices sorted by ascending L1 norm, ties by index.

    Kernel indices are flat row-major over (n_out, n_in); channel indices are
    output-channel positions.  Gabor-mode layers rank synthesized weights.
    """
    if granularity not in (KERNEL, CHANNEL):
        raise InvalidParameterError(f"granularity must be kernel or channel, got {granularity!r}")
    w = layer.synthesize() if layer.mode == Conv2d.GABOR else layer.weight.data
    absw = np.abs(np.asarray(w, dtype=np.float64))
    if granularity == KERNEL:
        norms = absw.sum(axis=(2, 3)).ravel()
        avail = (layer.kernel_mask & layer.channel_mask[:, None]).ravel()
    else:
        norms = absw.sum(axis=(1, 2, 3))
        avail = layer.channel_mask
    order = np.argsort(norms, kind="stable")
    return [int(i) for i in order if avail[i]]


def _next_consumer(model: Model, layer_pos: int):
    """(next plain conv, whether a batch norm sits before it) after layer_pos."""
    bn_between = False
    for layer in model.layers[layer_pos + 1 :]:
        if isinstance(layer, Conv2d):
            return layer, bn_between
        if isinstance(layer, BatchNorm2d):
            bn_between = True
        elif isinstance(layer, ResidualBlock):
            raise StructureError("channel pruning into a residual block is unsupported")
        elif isinstance(layer, Dense):
            if bn_between:
                raise StructureError(
                    "channel pruning through batch norm into a dense layer is unsupported"
                )
            return None, False
    return None, bn_between


def kernel_counts(layer: Conv2d) -> tuple:
    """(pruned, total) kernels vs. the layer's original geometry."""
    total = layer.orig_out * layer.orig_in
    present = int((layer.kernel_mask & layer.channel_mask[:, None]).sum())
    return total - present, total


def channel_counts(layer: Conv2d) -> tuple:
    """(pruned, total) output channels vs. the layer's original geometry."""
    total = layer.orig_out
    return total - int(layer.channel_mask.sum()), total


def prune_greedy(model: Model, spec: PruneSpec, eval_dataset) -> tuple:
    """Mask candidates in L1 order while accuracy stays within tolerance.

    Stops at the first candidate whose removal violates the tolerance
    (or skips it and continues when spec.stop_on_first_failure is False).
    Returns (model, PruneReport); the model is modified in place.
    """
    layer = model.conv(spec.layer_index)
    layer_pos = model.conv_indices()[spec.layer_index]
    next_conv = None
    if spec.granularity == CHANNEL:
        next_conv, _ = _next_consumer(model, layer_pos)

    snap_kernel = layer.kernel_mask.copy()
    snap_channel = layer.channel_mask.copy()
    snap_next = next_conv.kernel_mask.copy() if next_conv is not None else None

    w = layer.synthesize() if layer.mode == Conv2d.GABOR else layer.weight.data
    absw = np.abs(np.asarray(w, dtype=np.float64))
    norms = absw.sum(axis=(2, 3)).ravel() if spec.granularity == KERNEL else absw.sum(axis=(1, 2, 3))

    try:
        baseline = 100.0 * evaluate(model, eval_dataset, spec.batch_size)
        report = PruneReport(baseline, spec.granularity, spec.layer_index)
        for idx in l1_rank(layer, spec.granularity):
            if spec.granularity == KERNEL:
                o, i = divmod(idx, layer.n_in)
                layer.kernel_mask[o, i] = False
            else:
                layer.channel_mask[idx] = False
                if next_conv is not None:
                    saved_col = next_conv.kernel_mask[:, idx].copy()
                    next_conv.kernel_mask[:, idx] = False
            acc = 100.0 * evaluate(model, eval_dataset, spec.batch_size)
            if acc >= baseline - spec.tolerance:
                report.steps.append(PruneStep(len(report.steps) + 1, idx, float(norms[idx]), acc))
                continue
            if spec.granularity == KERNEL:
                o, i = divmod(idx, layer.n_in)
                layer.kernel_mask[o, i] = True
            else:
                layer.channel_mask[idx] = True
                if next_conv is not None:
                    next_conv.kernel_mask[:, idx] = saved_col
            if spec.stop_on_first_failure:
                break
    except Exception:
        layer.kernel_mask[...] = snap_kernel
        layer.channel_mask[...] = snap_channel
        if next_conv is not None:
            next_conv.kernel_mask[...] = snap_next
        raise

    counts = kernel_counts(layer) if spec.granularity == KERNEL else channel_counts(layer)
    report.pruned, report.total = counts
    return model, report


def _take_param(p: Parameter, idx, axis: int, kind: str | None = None) -> Parameter:
    return Parameter(np.take(p.data, idx, axis=axis), kind=kind or p.kind)


def _compact_conv(layer: Conv2d, keep_in) -> np.ndarray | None:
    """Drop removed input channels, then fully masked output channels.

    Returns the kept-output index array, or None when no channel is removed.
    """
    if keep_in is not None:
        dropped = np.setdiff1d(np.arange(layer.n_in), keep_in)
        if layer.kernel_mask[:, dropped].any():
            raise IntegrityError(
                "upstream channel was removed but this layer's kernels for it are unmasked"
            )
        if layer.mode == Conv2d.GABOR:
            layer.gabor_params = _take_param(layer.gabor_params, keep_in, 1)
        else:
            layer.weight = _take_param(layer.weight, keep_in, 1)
        layer.kernel_mask = layer.kernel_mask[:, keep_in]
        layer.n_in = len(keep_in)

    keep_out = None
    if not layer.channel_mask.all():
        keep_out = np.flatnonzero(layer.channel_mask)
        if layer.mode == Conv2d.GABOR:
            layer.gabor_params = _take_param(layer.gabor_params, keep_out, 0)
        else:
            layer.weight = _take_param(layer.weight, keep_out, 0)
        if layer.bias is not None:
            layer.bias = _take_param(layer.bias, keep_out, 0)
        layer.kernel_mask = layer.kernel_mask[keep_out]
        layer.channel_mask = np.ones(len(keep_out), dtype=bool)
        layer.n_out = len(keep_out)
    if layer.mode == Conv2d.GABOR and (keep_in is not None or keep_out is not None):
        layer.weight = Parameter(layer.synthesize())
    return keep_out


def compact(model: Model) -> Model:
    """Physically remove fully masked channels and shrink their consumers.

    Kernel masks that are not whole channels stay as masks.  Forward outputs
    agree with the masked model (up to accumulation-order rounding).
    """
    keep = None  # pending input-channel selection for the next consumer
    for pos, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            keep = _compact_conv(layer, keep)
        elif isinstance(layer, BatchNorm2d):
            if keep is not None:
                layer.gamma = _take_param(layer.gamma, keep, 0)
                layer.beta = _take_param(layer.beta, keep, 0)
                layer.running_mean = layer.running_mean[keep]
                layer.running_var = layer.running_var[keep]
                layer.n_ch = len(keep)
        elif isinstance(layer, Dense):
            if keep is not None:
                c, h, w = model.layer_in_shapes[pos]
                cols = layer.weight.data.reshape(layer.n_out, c, h, w)
                layer.weight = Parameter(
                    np.ascontiguousarray(cols[:, keep]).reshape(layer.n_out, -1)
                )
                layer.n_in = layer.weight.data.shape[1]
                keep = None
        elif isinstance(layer, ResidualBlock):
            if keep is not None:
                raise StructureError("compaction through residual blocks is unsupported")
    if keep is not None:
        raise IntegrityError("removed channels reached the model output unconsumed")
    model.check_shapes()
    return model
