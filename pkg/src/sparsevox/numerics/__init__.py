"""Tensor engine: autodiff ops, modules, optimizers, checkpoints."""

from . import autodiff
from .autodiff import Tensor, tensor
from .checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from .nn import MLP, attention, attention_batched, LayerNorm, Linear, Module, Parameter
from .optim import Adam, SGD, clip_grad_norm, cyclic_lr

__all__ = [
    "autodiff", "Tensor", "tensor", "Parameter", "Module", "Linear",
    "LayerNorm", "MLP", "attention", "attention_batched", "Adam", "SGD",
    "cyclic_lr", "clip_grad_norm", "save_checkpoint", "load_checkpoint",
    "MAGIC", "FORMAT_VERSION",
]
