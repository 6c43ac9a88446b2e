"""Training loop and evaluation.

Single-threaded and deterministic: given the same model state, datasets,
config, and generator state, two runs produce bit-identical trajectories.
"""

from __future__ import annotations

import numpy as np

from ..data import Dataset, augment_batch, batch_bounds
from ..errors import DimensionError, TrainingDivergedError
from .model import Model, cross_entropy_loss_and_grad
from .optim import SGD, OptimizerConfig


def evaluate(model: Model, dataset: Dataset, batch_size: int = 128) -> float:
    """Top-1 accuracy over the fixed batch sequence, in inference mode."""
    if dataset.n == 0:
        raise DimensionError("cannot evaluate on an empty dataset")
    correct = 0
    for s, e in batch_bounds(dataset.n, batch_size):
        logits = model.forward(dataset.images[s:e].astype(model.dtype, copy=False), training=False)
        correct += int((logits.argmax(axis=1) == dataset.labels[s:e]).sum())
    return correct / dataset.n


def train(
    model: Model,
    train_set: Dataset,
    config: OptimizerConfig,
    eval_set: Dataset | None = None,
    rng: np.random.Generator | None = None,
    optimizer: SGD | None = None,
    log=None,
) -> list[dict]:
    """Momentum-SGD training; returns one metrics dict per epoch."""
    if train_set.n == 0:
        raise DimensionError("cannot train on an empty dataset")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    opt = optimizer if optimizer is not None else SGD(model, config)
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        perm = rng.permutation(train_set.n)
        losses = []
        for s, e in batch_bounds(train_set.n, config.batch_size):
            idx = perm[s:e]
            x = train_set.images[idx]
            if train_set.augment_crop or train_set.augment_flip:
                x = augment_batch(
                    x, rng, train_set.augment_crop, train_set.augment_flip, train_set.crop_pad
                )
            x = x.astype(model.dtype, copy=False)
            y = train_set.labels[idx]
            model.zero_grads()
            logits = model.forward(x, training=True)
            loss, dlogits = cross_entropy_loss_and_grad(logits, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch [{s}:{e}]"
                )
            model.backward(dlogits)
            opt.step(lr)
            losses.append(loss)
        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        if eval_set is not None:
            entry["eval_acc"] = evaluate(model, eval_set, config.batch_size)
        if log is not None:
            acc = f" eval_acc={entry['eval_acc']:.4f}" if eval_set is not None else ""
            log(f"epoch={epoch} lr={lr:g} loss={entry['train_loss']:.4f}{acc}")
        history.append(entry)
    return history
