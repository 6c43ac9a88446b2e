"""Momentum SGD with weight decay and a piecewise-constant learning-rate schedule.

Weight decay is the classic L2-into-the-gradient form.  Tensor parameters
decay in full; Gabor parameter grids decay only in the amplitude entry, so
unnecessary synthesized filters can dissipate without distorting their
geometry parameters.  The amplitude coefficient is separately tunable
because dissipation scales with the cumulative lr x decay product, which
is orders of magnitude smaller on short schedules than on long ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..gabor import AMPLITUDE_INDEX
from .model import Model


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # Decay coefficient for Gabor amplitudes; defaults to weight_decay.
    # Short schedules need it much larger than the tensor decay to reach
    # the same cumulative lr x decay dissipation as a long schedule.
    amplitude_decay: float | None = None
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    # (fraction-of-epochs, multiplier) pairs; default is the x0.1 drop at 50%/75%.
    lr_drops: tuple = ((0.5, 0.1), (0.75, 0.1))

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    @property
    def effective_amplitude_decay(self) -> float:
        return self.weight_decay if self.amplitude_decay is None else self.amplitude_decay

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for frac, factor in self.lr_drops:
            if epoch >= int(frac * self.epochs):
                lr *= factor
        return lr


class SGD:
    def __init__(self, model: Model, config: OptimizerConfig):
        self.model = model
        self.config = config
        self.velocity = {name: np.zeros_like(p.data) for name, p in model.named_params()}

    def step(self, lr: float) -> None:
        wd = self.config.weight_decay
        amp_wd = self.config.effective_amplitude_decay
        mom = self.config.momentum
        for name, p in self.model.named_params():
            g = p.grad.copy()
            if p.kind == "gabor":
                if amp_wd:
                    g[..., AMPLITUDE_INDEX] += amp_wd * p.data[..., AMPLITUDE_INDEX]
            elif wd:
                g += wd * p.data
            v = self.velocity[name]
            v *= mom
            v += g
            p.data -= lr * v

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        return sorted(self.velocity.items())

    def load_state(self, items) -> None:
        """Restore velocities from (name, array) pairs or a name->array dict."""
        pairs = items.items() if hasattr(items, "items") else items
        for name, buf in pairs:
            if name in self.velocity:
                if self.velocity[name].shape != buf.shape:
                    raise ConfigError(f"optimizer state {name} has shape {buf.shape}")
                self.velocity[name] = buf.astype(self.velocity[name].dtype)
