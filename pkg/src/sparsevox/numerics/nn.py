"""Parameter/module plumbing and the attention building block."""

from __future__ import annotations

import math

import numpy as np

from ..exceptions import DimensionError, NumericsError
from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Parameter", "Module", "Linear", "LayerNorm", "MLP", "attention",
           "attention_batched"]


class Parameter:
    """A learnable tensor plus its checkpoint path.

    ``name`` is assigned when the owning model tree is walked; it is the
    dotted attribute path and therefore unique within a model.
    """

    def __init__(self, data: np.ndarray, name: str = ""):
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={self.data.shape})"


class Module:
    """Minimal container: children are attributes that are Parameters,
    Modules, or lists of Modules."""

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            path = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """y = x W + b with Glorot-uniform W unless zero-initialized."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 zero_init: bool = False, bias_init: float = 0.0):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.w = Parameter(w)
        self.b = Parameter(np.full(n_out, float(bias_init)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            raise DimensionError(f"Linear expects 2-D input, got {x.shape}")
        return ad.add_bias(ad.matmul(x, self.w.tensor), self.b.tensor)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma.tensor, self.beta.tensor, self.eps)


class MLP(Module):
    """Affine-ReLU stack; no activation after the final affine."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    """True marks a blocked position; blocked logits get -inf."""
    bias = np.zeros(mask.shape)
    bias[mask] = -np.inf
    return bias


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) [+ mask bias]) v for 2-D q, k, v.

    ``mask`` is boolean [Nq, Nk]; True blocks the pair. A query row with
    every key blocked is an error.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: q dim {q.shape} vs k dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: k rows {k.shape} vs v rows {v.shape}")
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        if mask.shape != logits.shape:
            raise DimensionError(
                f"attention: mask {mask.shape} does not match logits {logits.shape}"
            )
        if mask.all(axis=1).any():
            raise NumericsError("attention: some query has every key masked")
        logits = ad.add(logits, Tensor(_mask_bias(mask)))
    return ad.matmul(ad.softmax(logits, axis=-1), v)


def attention_batched(q: Tensor, k: Tensor, v: Tensor,
                      mask: np.ndarray | None = None) -> Tensor:
    """Set-parallel attention on [B, s, d] stacks; mask is [B, s, s]."""
    logits = ad.scale(ad.bmm(q, ad.transpose_last2(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        if mask.shape != logits.shape:
            raise DimensionError(
                f"attention_batched: mask {mask.shape} vs logits {logits.shape}"
            )
        if mask.all(axis=2).any():
            raise NumericsError("attention_batched: fully masked query row")
        logits = ad.add(logits, Tensor(_mask_bias(mask)))
    return ad.bmm(ad.softmax(logits, axis=-1), v)
