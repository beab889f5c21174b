"""Layers, networks, optimizers, reference architectures and checkpoints."""
from pcnet.nn.architectures import ARCHITECTURES, build_network, conv4, init_params, mlp, resnet
from pcnet.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from pcnet.nn.layers import (
    Activation,
    Add,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2,
    PcaConv2D,
    PcaDense,
    softmax,
)
from pcnet.nn.network import (
    ForwardCache,
    Network,
    ParamCount,
    backward_and_step,
    capture_activations,
    count_params,
    evaluate,
    softmax_cross_entropy,
    train_step,
)
from pcnet.nn.optim import SGD, Adam, StepSchedule, make_optimizer

__all__ = [
    "ARCHITECTURES", "Activation", "Adam", "Add", "BatchNorm", "Checkpoint", "Conv2D", "Dense",
    "Flatten", "ForwardCache", "GlobalAvgPool", "Layer", "MaxPool2", "Network", "ParamCount",
    "PcaConv2D", "PcaDense", "SGD", "StepSchedule", "backward_and_step", "build_network",
    "capture_activations", "conv4", "count_params", "evaluate", "init_params", "load_checkpoint",
    "make_optimizer", "mlp", "resnet", "save_checkpoint", "softmax", "softmax_cross_entropy",
    "train_step",
]
