from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    GlobalAvgPool,
    Layer,
    MaxPool2d,
    Parameter,
    ReLU,
    ResidualBlock,
    col2im,
    im2col,
)
from .model import Model, cross_entropy_loss_and_grad, softmax
from .optim import SGD, OptimizerConfig
from .train import evaluate, train

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "Dense",
    "GlobalAvgPool",
    "Layer",
    "MaxPool2d",
    "Model",
    "Parameter",
    "ReLU",
    "ResidualBlock",
    "SGD",
    "OptimizerConfig",
    "col2im",
    "im2col",
    "cross_entropy_loss_and_grad",
    "softmax",
    "evaluate",
    "train",
]
