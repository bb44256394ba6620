"""A small numpy network engine: the layers, loss and optimizer EEGNet needs."""

from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .layers import (ELU, AvgPool, BatchNorm, DenseSigmoid, DepthwiseSpatial, Dropout, Flatten, Layer,
                     SeparableConv, TemporalConv, bce_loss, same_padding, sigmoid)
from .fused import FusedFrontEnd, lagged_moments
from .model import Sequential
from .optim import AdamState, adam_step, max_norm_project

__all__ = [
    "AdamState", "AvgPool", "BatchNorm", "DenseSigmoid", "DepthwiseSpatial", "Dropout", "ELU", "Flatten", "FusedFrontEnd",
    "Layer", "SeparableConv", "Sequential", "TemporalConv", "adam_step", "bce_loss", "decode_checkpoint",
    "encode_checkpoint", "lagged_moments", "load_checkpoint", "max_norm_project", "same_padding", "save_checkpoint", "sigmoid",
]
