"""Redundant-token elimination: an auxiliary foreground head supervised by
dilated-cuboid labels with focal loss, then Top-K retention so the decoder
sees a fixed token budget."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, points_in_boxes
from .embedding import EmbeddedTokenSet
from .exceptions import ConfigError
from .numerics import Linear, Module, Tensor
from .numerics import autodiff as ad

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class EliminationConfig:
    k: float = 0.5            # int >= 1 keeps that many tokens; 0 < k <= 1 keeps a fraction
    dilation: float = 1.5
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigError("k must be positive")
        if self.k > 1 and not float(self.k).is_integer():
            raise ConfigError("k above 1 must be an integer token count")
        if self.dilation < 1:
            raise ConfigError("dilation must be >= 1")

    def resolve_k(self, m: int) -> int:
        if self.k > 1 or (self.k == 1 and isinstance(self.k, int)):
            return int(self.k)
        return max(1, math.ceil(self.k * m))


def label_tokens(coords_m: np.ndarray, gt: list[Box3D], dilation: float = 1.5) -> np.ndarray:
    """1 where the point lies in any yaw-aware cuboid scaled by ``dilation``
    about its center, else 0."""
    if dilation < 1:
        raise ConfigError("dilation must be >= 1")
    coords = np.asarray(coords_m, dtype=np.float64).reshape(-1, 3)
    if not gt:
        return np.zeros(len(coords), dtype=np.float64)
    return points_in_boxes(coords, gt, dilation).astype(np.float64)


def focal_loss(p: Tensor, y: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean alpha-balanced focal term over tokens.

    y * alpha * (1-p)^gamma * (-log p) + (1-y) * (1-alpha) * p^gamma * (-log(1-p)).
    Callers pass probabilities already clamped away from {0, 1}.
    """
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    yt = Tensor(y)
    one_minus_p = ad.add_const(ad.neg(p), 1.0)
    pos = ad.mul(yt, ad.mul(ad.pow_const(one_minus_p, gamma), ad.neg(ad.log(p))))
    neg_t = ad.mul(Tensor(1.0 - y),
                   ad.mul(ad.pow_const(p, gamma), ad.neg(ad.log(one_minus_p))))
    return ad.mean(ad.add(ad.scale(pos, alpha), ad.scale(neg_t, 1.0 - alpha)))


class ScoreHead(Module):
    """Two-layer perceptron producing per-token foreground probabilities."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, d_model, rng)
        self.fc2 = Linear(d_model, 1, rng, bias_init=-2.0)  # background-heavy prior

    def __call__(self, tokens: Tensor) -> Tensor:
        logits = self.fc2(ad.relu(self.fc1(tokens)))
        p = ad.sigmoid(ad.reshape(logits, (tokens.shape[0],)))
        return ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def topk_select(tokens: EmbeddedTokenSet, scores: np.ndarray, k: int) -> EmbeddedTokenSet:
    """Keep the k highest-scoring tokens, ties to the lower index, preserving
    the tokens' relative input order. k >= M keeps everything."""
    if k < 1:
        raise ConfigError("k must be >= 1 after fraction resolution")
    m = len(tokens)
    if k >= m:
        return tokens
    scores = np.asarray(scores, dtype=np.float64).reshape(m)
    order = np.argsort(-scores, kind="stable")  # stable: equal scores keep low index first
    keep = np.sort(order[:k])
    return EmbeddedTokenSet(ad.gather_rows(tokens.tokens, keep),
                            tokens.coords_m[keep], tokens.coords_idx[keep],
                            tokens.valid[keep])


def pad_tokens(tokens: EmbeddedTokenSet, k: int) -> EmbeddedTokenSet:
    """Pad with zero rows (valid=False) up to k so the decoder token count
    is constant per config."""
    m = len(tokens)
    if m >= k:
        return tokens
    d = tokens.d_model
    padded = ad.concat([tokens.tokens, Tensor(np.zeros((k - m, d)))], axis=0)
    coords_m = np.r_[tokens.coords_m, np.zeros((k - m, 3))]
    coords_idx = np.r_[tokens.coords_idx, np.zeros((k - m, 3), np.int64)]
    valid = np.r_[tokens.valid, np.zeros(k - m, dtype=bool)]
    return EmbeddedTokenSet(padded, coords_m, coords_idx, valid)
