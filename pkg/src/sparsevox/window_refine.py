"""Windowed set attention over sparse tokens (the deep fusion module).

Tokens are bucketed into 3D windows, sorted along an axis, chunked into
fixed-size sets, and refined by self-attention within each set. A block
runs four sub-layers: along_x, along_x shifted, along_y, along_y shifted.
Token count and coordinates never change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import EmbeddedTokenSet
from .exceptions import ConfigError
from .numerics import LayerNorm, Linear, Module, Tensor
from .numerics import autodiff as ad
from .numerics.nn import attention_batched


@dataclass
class WindowPartition:
    """Disjoint cover of token indices by attention sets.

    Every token index appears in exactly one set; all tokens of a set share
    a window id under the partition's shift.
    """

    window_shape: tuple[int, int, int]
    shift: tuple[int, int, int]
    sets: list[np.ndarray]

    @property
    def set_count(self) -> int:
        return len(self.sets)


def partition(coords: np.ndarray, window_shape, shift, sort_axis: int,
              set_size: int) -> WindowPartition:
    """Assign each token to floor((coord + shift) / window_shape), order
    tokens inside a window by sort_axis-major full lexicographic key, and
    chunk into sets of at most set_size."""
    wshape = np.asarray(window_shape, dtype=np.int64)
    if (wshape < 1).any():
        raise ConfigError(f"window_shape must be positive, got {window_shape}")
    if set_size < 1:
        raise ConfigError("set_size must be >= 1")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    sh = np.asarray(shift, dtype=np.int64)
    win = (coords + sh) // wshape
    axes = [sort_axis] + [a for a in range(3) if a != sort_axis]
    # np.lexsort: last key is primary -> reverse the (window, coord) key list.
    keys = [coords[:, a] for a in reversed(axes)] + [win[:, 2], win[:, 1], win[:, 0]]
    order = np.lexsort(keys)
    win_sorted = win[order]
    change = np.r_[True, (win_sorted[1:] != win_sorted[:-1]).any(axis=1)] if len(order) else np.zeros(0, bool)
    starts = np.flatnonzero(change)
    sets: list[np.ndarray] = []
    for s, e in zip(starts, np.r_[starts[1:], len(order)]):
        block = order[s:e]
        for off in range(0, len(block), set_size):
            sets.append(block[off:off + set_size])
    return WindowPartition(tuple(int(v) for v in wshape),
                           tuple(int(v) for v in sh), sets)


def _set_attention(tokens: Tensor, sets: list[np.ndarray], set_size: int,
                   wq: Linear, wk: Linear, wv: Linear, wo: Linear) -> Tensor:
    """Batched within-set self-attention; returns rows in original order."""
    m, d = tokens.shape
    n_sets = len(sets)
    idx = np.full((n_sets, set_size), m, dtype=np.int64)  # m = padding row
    for i, s in enumerate(sets):
        idx[i, :len(s)] = s
    pad_mask = idx == m  # [S, s] True on padding
    padded = ad.concat([tokens, Tensor(np.zeros((1, d)))], axis=0)
    q = ad.reshape(ad.gather_rows(wq(padded), idx.reshape(-1)), (n_sets, set_size, d))
    k = ad.reshape(ad.gather_rows(wk(padded), idx.reshape(-1)), (n_sets, set_size, d))
    v = ad.reshape(ad.gather_rows(wv(padded), idx.reshape(-1)), (n_sets, set_size, d))
    # Block a pair when the KEY is padding; padded queries attend anywhere
    # (their output is discarded by the inverse gather).
    mask = np.broadcast_to(pad_mask[:, None, :], (n_sets, set_size, set_size)).copy()
    att = attention_batched(q, k, v, mask)
    flat = ad.reshape(att, (n_sets * set_size, d))
    inverse = np.zeros(m, dtype=np.int64)
    inverse[idx.reshape(-1)[~pad_mask.reshape(-1)]] = np.flatnonzero(~pad_mask.reshape(-1))
    return wo(ad.gather_rows(flat, inverse))


class SetAttentionLayer(Module):
    """Pre-defined-partition transformer encoder layer: within-set
    self-attention + residual + LN, then FFN + residual + LN."""

    def __init__(self, d_model: int, ffn_dim: int, rng: np.random.Generator):
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.ffn1 = Linear(d_model, ffn_dim, rng)
        self.ffn2 = Linear(ffn_dim, d_model, rng)

    def __call__(self, tokens: Tensor, sets: list[np.ndarray], set_size: int) -> Tensor:
        att = _set_attention(tokens, sets, set_size, self.wq, self.wk, self.wv, self.wo)
        x = self.norm1(ad.add(tokens, att))
        y = self.ffn2(ad.relu(self.ffn1(x)))
        return self.norm2(ad.add(x, y))


class RefineBlock(Module):
    """One block = four set-attention sub-layers over the four canonical
    partitions (x-major, x-major shifted, y-major, y-major shifted)."""

    def __init__(self, d_model: int, ffn_dim: int, rng: np.random.Generator):
        self.sublayers = [SetAttentionLayer(d_model, ffn_dim, rng) for _ in range(4)]


class DeepFusionModule(Module):
    """A stack of refine blocks sharing one window/set configuration."""

    def __init__(self, d_model: int, blocks: int, window_shape, set_size: int,
                 shift, ffn_dim: int, rng: np.random.Generator):
        self.window_shape = tuple(int(v) for v in window_shape)
        self.set_size = int(set_size)
        self.shift = tuple(int(v) for v in shift)
        self.blocks = [RefineBlock(d_model, ffn_dim, rng) for _ in range(blocks)]

    def _partitions(self, coords: np.ndarray) -> list[WindowPartition]:
        zero = (0, 0, 0)
        return [
            partition(coords, self.window_shape, zero, 0, self.set_size),
            partition(coords, self.window_shape, self.shift, 0, self.set_size),
            partition(coords, self.window_shape, zero, 1, self.set_size),
            partition(coords, self.window_shape, self.shift, 1, self.set_size),
        ]

    def refine(self, emb: EmbeddedTokenSet) -> EmbeddedTokenSet:
        """Refined tokens; coordinates, masks, and token count pass through."""
        if not self.blocks or len(emb) == 0:
            return emb
        parts = self._partitions(emb.coords_idx)
        tokens = emb.tokens
        for block in self.blocks:
            for sub, part in zip(block.sublayers, parts):
                tokens = sub(tokens, part.sets, self.set_size)
        return EmbeddedTokenSet(tokens, emb.coords_m, emb.coords_idx, emb.valid)

    __call__ = refine
