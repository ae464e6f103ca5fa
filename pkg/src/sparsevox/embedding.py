"""3D positional embeddings, token embedding (features + position), and
learnable decoder queries anchored at 3D reference points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError
from .numerics import Linear, Module, Parameter, Tensor
from .numerics import autodiff as ad
from .voxels import SparseVoxelSet


def sinusoid_features(coords: Tensor, d_model: int) -> Tensor:
    """Raw interleaved (sin, cos) ladder over the three axes.

    Per axis there are d_model/6 frequency pairs, geometric from 1 down to
    1/10000, at angle 2*pi*f*x. Differentiable in coords (query reference
    points train through this).
    """
    if d_model % 6 != 0:
        raise ConfigError(f"d_model must be divisible by 6, got {d_model}")
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"coords must be [M, 3], got {coords.shape}")
    n_freq = d_model // 6
    freqs = np.geomspace(1.0, 1e-4, n_freq) if n_freq > 1 else np.array([1.0])
    # Block-diagonal frequency matrix: axis a populates columns [a*n, (a+1)*n).
    fmat = np.zeros((3, 3 * n_freq))
    for a in range(3):
        fmat[a, a * n_freq:(a + 1) * n_freq] = 2.0 * np.pi * freqs
    angles = ad.matmul(coords, Tensor(fmat))  # [M, 3n]
    m = coords.shape[0]
    s = ad.reshape(ad.sin(angles), (m, 3 * n_freq, 1))
    c = ad.reshape(ad.cos(angles), (m, 3 * n_freq, 1))
    return ad.reshape(ad.concat([s, c], axis=2), (m, d_model))


class PositionalEmbedding(Module):
    """Sinusoid ladder plus a learned affine-ReLU-affine refinement.

    The sinusoid features skip past the learned map: nearby coordinates
    then produce correlated embeddings from the first step, which is what
    lets cross-attention localize before any training.
    """

    def __init__(self, d_model: int, rng: np.random.Generator):
        if d_model % 6 != 0:
            raise ConfigError(f"d_model must be divisible by 6, got {d_model}")
        self.d_model = d_model
        self.fc1 = Linear(d_model, d_model, rng)
        self.fc2 = Linear(d_model, d_model, rng)

    def __call__(self, coords_norm: Tensor) -> Tensor:
        coords = ad.clip(coords_norm, 0.0, 1.0)
        return self.from_raw(sinusoid_features(coords, self.d_model))

    def from_raw(self, raw: Tensor) -> Tensor:
        """Apply the learned refinement to precomputed sinusoid features."""
        return ad.add(raw, self.fc2(ad.relu(self.fc1(raw))))


@dataclass
class EmbeddedTokenSet:
    """Width-d_model tokens plus the coordinates they came from.

    ``valid`` is False on padding rows appended to reach a fixed decoder
    token budget.
    """

    tokens: Tensor            # [M, d_model]
    coords_m: np.ndarray      # [M, 3] metric centers
    coords_idx: np.ndarray    # [M, 3] integer cell coords at current level
    valid: np.ndarray         # [M] bool

    def __post_init__(self):
        m = self.tokens.shape[0]
        if not (len(self.coords_m) == len(self.coords_idx) == len(self.valid) == m):
            raise DimensionError("EmbeddedTokenSet row counts disagree")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]


def embed_tokens(fused: SparseVoxelSet, proj: Linear,
                 pos_embed: PositionalEmbedding) -> EmbeddedTokenSet:
    """tokens = proj(features) + pos_embed(normalized cell centers)."""
    if fused.width != proj.w.data.shape[0]:
        raise DimensionError(
            f"embed_tokens: feature width {fused.width} != projection input "
            f"{proj.w.data.shape[0]}"
        )
    m = len(fused)
    if m == 0:
        return EmbeddedTokenSet(Tensor(np.zeros((0, pos_embed.d_model))),
                                np.zeros((0, 3)), np.zeros((0, 3), np.int64),
                                np.zeros(0, dtype=bool))
    pos = pos_embed(Tensor(fused.centers_norm()))
    tokens = ad.add(proj(fused.feats), pos)
    return EmbeddedTokenSet(tokens, fused.centers_m(), fused.coords.copy(),
                            np.ones(m, dtype=bool))


class QuerySet(Module):
    """Learnable 3D reference points in the normalized [0,1]^3 grid space.

    Content vectors are re-derived from the current reference points by the
    positional embedding on every forward pass; they are never stored.
    """

    def __init__(self, ref_points: np.ndarray, d_model: int):
        self.ref_points = Parameter(np.asarray(ref_points, dtype=np.float64))
        self.d_model = d_model

    def content(self, pos_embed: PositionalEmbedding) -> Tensor:
        return pos_embed(self.ref_points.tensor)

    def clamp_(self) -> None:
        """Clamp reference points back into [0,1]; call after optimizer steps."""
        np.clip(self.ref_points.data, 0.0, 1.0, out=self.ref_points.data)

    @property
    def count(self) -> int:
        return self.ref_points.data.shape[0]


def init_queries(n_queries: int, d_model: int, seed: int) -> QuerySet:
    if n_queries <= 0:
        raise ConfigError(f"n_queries must be positive, got {n_queries}")
    rng = np.random.default_rng(seed)
    ref = rng.uniform(0.0, 1.0, size=(n_queries, 3))
    return QuerySet(ref, d_model=d_model)
