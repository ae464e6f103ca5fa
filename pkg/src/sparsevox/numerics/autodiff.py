"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every op is a function returning a new
Tensor whose backward closure scatters gradients into its parents. There is
no broadcasting beyond bias-add; callers reshape explicitly. All data is
64-bit, row-major numpy.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError, NumericsError

__all__ = [
    "Tensor", "tensor", "add", "add_bias", "sub", "mul", "neg", "scale",
    "add_const", "matmul", "bmm", "transpose", "transpose_last2", "reshape",
    "concat", "gather_rows", "relu", "sigmoid", "exp", "log", "sin", "cos",
    "tanh", "absolute", "clip", "pow_const", "softmax", "layer_norm",
    "segment_max", "mean", "total",
]


class Tensor:
    """A dense array plus an optional gradient buffer and graph linkage.

    Invariants: ``grad`` is either None or an array of exactly ``data``'s
    shape; ``data`` is float64 and C-contiguous.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, parents=(), bwd=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # copy: g may be a view
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar tensor."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() requires a scalar tensor, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # Operator sugar; the named functions below carry the semantics.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _needs(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, _needs(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out._bwd = bwd
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]: the single sanctioned broadcast."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"add_bias: bias {b.data.shape} does not match last dim of {x.data.shape}"
        )
    out = Tensor(x.data + b.data, _needs(x, b), (x, b))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, b.data.shape[0]).sum(axis=0))

    out._bwd = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, _needs(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    out._bwd = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, _needs(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out._bwd = bwd
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(-g) if a.requires_grad else None
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g * c) if a.requires_grad else None
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c, a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g) if a.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; dA = g @ B^T, dB = A^T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, _needs(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._bwd = bwd
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading axis: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2] != b.data.shape[1]
    ):
        raise DimensionError(f"bmm: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, _needs(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accumulate(a.data.transpose(0, 2, 1) @ g)

    out._bwd = bwd
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {a.data.shape}")
    out = Tensor(a.data.T, a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g.T) if a.requires_grad else None
    return out


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError(f"transpose_last2 expects >=2-D, got {a.data.shape}")
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    out = Tensor(a.data.transpose(axes), a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g.transpose(axes)) if a.requires_grad else None
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,))
    out._bwd = (
        lambda g: a._accumulate(g.reshape(a.data.shape)) if a.requires_grad else None
    )
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(out_data, _needs(*parts), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    out._bwd = bwd
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds.

    The scatter groups duplicate indices with a sort + reduceat instead of
    np.add.at, which is much faster for wide rows.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects 2-D, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], a.requires_grad, (a,))

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            order = np.argsort(idx, kind="stable")
            si = idx[order]
            starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
            if len(si):
                sums = np.add.reduceat(g[order], starts, axis=0)
                buf[si[starts]] = sums
            a._accumulate(buf)

    out._bwd = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad, (a,))
    out._bwd = (
        lambda g: a._accumulate(g * (a.data > 0.0)) if a.requires_grad else None
    )
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g * s * (1.0 - s)) if a.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e, a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g * e) if a.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g / a.data) if a.requires_grad else None
    return out


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.data), a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g * np.cos(a.data)) if a.requires_grad else None
    return out


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.data), a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(-g * np.sin(a.data)) if a.requires_grad else None
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, a.requires_grad, (a,))
    out._bwd = lambda g: a._accumulate(g * (1.0 - t * t)) if a.requires_grad else None
    return out


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), a.requires_grad, (a,))
    out._bwd = (
        lambda g: a._accumulate(g * np.sign(a.data)) if a.requires_grad else None
    )
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes through where the input was not clipped."""
    out = Tensor(np.clip(a.data, lo, hi), a.requires_grad, (a,))
    inside = (a.data >= lo) & (a.data <= hi)
    out._bwd = lambda g: a._accumulate(g * inside) if a.requires_grad else None
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data**p, a.requires_grad, (a,))
    out._bwd = (
        lambda g: a._accumulate(g * p * a.data ** (p - 1.0))
        if a.requires_grad
        else None
    )
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis.

    -inf entries are legal (masked positions get weight exactly 0); a row
    that is entirely -inf or contains NaN is an error.
    """
    x = a.data
    if np.isnan(x).any():
        raise NumericsError("softmax received NaN input")
    m = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise NumericsError("softmax row is fully masked (all -inf)")
    e = np.exp(x - m)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / denom
    out = Tensor(y, a.requires_grad, (a,))

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate((g - dot) * y)

    out._bwd = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then per-feature affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError("layer_norm: affine params must match the last dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, _needs(x, gamma, beta), (x, gamma, beta))

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(
                axis=-1, keepdims=True
            )
            x._accumulate(term * inv)

    out._bwd = bwd
    return out


def segment_max(x: Tensor, boundaries: np.ndarray) -> Tensor:
    """Column-wise max over contiguous row segments.

    ``boundaries`` holds segment start offsets (ascending, starting at 0);
    rows must already be sorted by segment. Gradient flows to the first row
    attaining each per-column maximum.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"segment_max expects 2-D, got {x.data.shape}")
    bounds = np.asarray(boundaries, dtype=np.int64)
    maxima = np.maximum.reduceat(x.data, bounds, axis=0)
    seg_of_row = np.repeat(np.arange(len(bounds)), np.diff(np.append(bounds, x.data.shape[0])))
    hit = x.data == maxima[seg_of_row]
    row_ids = np.where(hit, np.arange(x.data.shape[0])[:, None], x.data.shape[0])
    argmax_rows = np.minimum.reduceat(row_ids, bounds, axis=0)
    out = Tensor(maxima, x.requires_grad, (x,))

    def bwd(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            cols = np.arange(x.data.shape[1])[None, :].repeat(len(bounds), axis=0)
            buf[argmax_rows.reshape(-1), cols.reshape(-1)] += g.reshape(-1)
            x._accumulate(buf)

    out._bwd = bwd
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.array(a.data.mean()), a.requires_grad, (a,))
    out._bwd = (
        lambda g: a._accumulate(np.full_like(a.data, float(g) / n))
        if a.requires_grad
        else None
    )
    return out


def total(a: Tensor) -> Tensor:
    """Sum of all entries (named to avoid shadowing builtins)."""
    out = Tensor(np.array(a.data.sum()), a.requires_grad, (a,))
    out._bwd = (
        lambda g: a._accumulate(np.full_like(a.data, float(g)))
        if a.requires_grad
        else None
    )
    return out
