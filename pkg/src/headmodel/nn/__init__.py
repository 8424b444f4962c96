"""Minimal dense-tensor network engine: layers, loss, Adam and checkpoints."""
from .adam import Adam
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    BatchNorm, Concat, Conv3x3, Deconv2x2, Layer, LogSigmoid, MaxPool2x2, ReLU, Sigmoid,
)
from .losses import cross_entropy

__all__ = [
    "Adam", "BatchNorm", "Concat", "Conv3x3", "Deconv2x2", "Layer", "LogSigmoid",
    "MaxPool2x2", "ReLU", "Sigmoid", "cross_entropy", "load_checkpoint", "save_checkpoint",
]
