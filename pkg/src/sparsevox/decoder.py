"""Set-prediction decoder over sparse tokens: transformer layers, box/class
heads, Hungarian matching, the matching-based detection loss, and
training-only query denoising."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import Box3D, DetectionSet
from .embedding import EmbeddedTokenSet
from .exceptions import ConfigError, DimensionError, NumericsError
from .numerics import LayerNorm, Linear, Module, Tensor
from .numerics import autodiff as ad
from .numerics.nn import attention

LOG_SIZE_CLIP = 6.0  # exp bound when materializing boxes; keeps sizes finite


@dataclass
class MatchResult:
    """Injective query-to-ground-truth assignment of min(Nq, G) pairs."""

    pairs: list[tuple[int, int]]
    total_cost: float


def hungarian_match(cost) -> MatchResult:
    """Exact minimum-cost bipartite assignment (Kuhn-Munkres family)."""
    c = cost.data if isinstance(cost, Tensor) else np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost must be a 2-D matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise NumericsError("hungarian_match: non-finite cost entry")
    rows, cols = linear_sum_assignment(c)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return MatchResult(pairs=[(int(r), int(g)) for r, g in pairs],
                       total_cost=float(c[rows, cols].sum()))


@dataclass(frozen=True)
class BoxCodec:
    """Shared normalization for box regression.

    Regression vector layout (10): center in range-normalized [0,1] units
    scaled by center_weight (3), log size (3), (sin yaw, cos yaw),
    velocity / vel_scale (2). The center weight balances the L1: meter-level
    localization error would otherwise be dwarfed by the log-size and yaw
    terms.
    """

    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    vel_scale: float = 10.0
    center_weight: float = 5.0

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.range_max) - np.asarray(self.range_min)

    def encode_gt(self, boxes: list[Box3D]) -> np.ndarray:
        out = np.zeros((len(boxes), 10))
        for i, b in enumerate(boxes):
            out[i, 0:3] = ((np.asarray(b.center) - self.range_min) / self.span
                           * self.center_weight)
            out[i, 3:6] = np.log(b.size)
            out[i, 6] = math.sin(b.yaw)
            out[i, 7] = math.cos(b.yaw)
            out[i, 8:10] = np.asarray(b.velocity) / self.vel_scale
        return out

    def denorm_center(self, center_norm: Tensor) -> Tensor:
        m = center_norm.shape[0]
        span = np.broadcast_to(self.span, (m, 3)).copy()
        lo = np.broadcast_to(np.asarray(self.range_min), (m, 3)).copy()
        return ad.add(ad.mul(center_norm, Tensor(span)), Tensor(lo))


@dataclass
class RawPrediction:
    """Differentiable head outputs for one decoder layer."""

    center_norm: Tensor  # [Nq, 3]
    log_size: Tensor     # [Nq, 3]
    yaw_sc: Tensor       # [Nq, 2] regressed (sin, cos)
    velocity: Tensor     # [Nq, 2] m/s
    logits: Tensor       # [Nq, num_classes]

    def regression_vector(self, codec: BoxCodec) -> Tensor:
        vel_scaled = ad.scale(self.velocity, 1.0 / codec.vel_scale)
        center_scaled = ad.scale(self.center_norm, codec.center_weight)
        return ad.concat([center_scaled, self.log_size, self.yaw_sc, vel_scaled],
                         axis=1)

    def slice_rows(self, lo: int, hi: int) -> "RawPrediction":
        idx = np.arange(lo, hi)
        return RawPrediction(*(ad.gather_rows(t, idx) for t in
                               (self.center_norm, self.log_size, self.yaw_sc,
                                self.velocity, self.logits)))


class DecoderLayer(Module):
    """Self-attention over queries, cross-attention into the scene tokens,
    then a feed-forward; residual + layer norm after each."""

    def __init__(self, d_model: int, ffn_dim: int, rng: np.random.Generator):
        self.sq = Linear(d_model, d_model, rng)
        self.sk = Linear(d_model, d_model, rng)
        self.sv = Linear(d_model, d_model, rng)
        self.so = Linear(d_model, d_model, rng)
        self.cq = Linear(d_model, d_model, rng)
        self.ck = Linear(d_model, d_model, rng)
        self.cv = Linear(d_model, d_model, rng)
        self.co = Linear(d_model, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.norm3 = LayerNorm(d_model)
        self.ffn1 = Linear(d_model, ffn_dim, rng)
        self.ffn2 = Linear(ffn_dim, d_model, rng)

    def __call__(self, content: Tensor, query_pos: Tensor, tokens: Tensor,
                 key_pos: Tensor | None, self_mask: np.ndarray | None,
                 cross_mask: np.ndarray | None) -> Tensor:
        qk = ad.add(content, query_pos)
        att = attention(self.sq(qk), self.sk(qk), self.sv(content), self_mask)
        x = self.norm1(ad.add(content, self.so(att)))
        keys = ad.add(tokens, key_pos) if key_pos is not None else tokens
        att = attention(self.cq(ad.add(x, query_pos)), self.ck(keys),
                        self.cv(tokens), cross_mask)
        x = self.norm2(ad.add(x, self.co(att)))
        y = self.ffn2(ad.relu(self.ffn1(x)))
        return self.norm3(ad.add(x, y))


class TransformerDecoder(Module):
    def __init__(self, d_model: int, layers: int, ffn_dim: int,
                 rng: np.random.Generator):
        if layers < 1:
            raise ConfigError("decoder needs at least one layer")
        self.layers = [DecoderLayer(d_model, ffn_dim, rng) for _ in range(layers)]

    def __call__(self, tokens: EmbeddedTokenSet, content: Tensor,
                 query_pos: Tensor, key_pos: Tensor | None,
                 self_mask: np.ndarray | None = None,
                 key_pos_every_layer: bool = True) -> list[Tensor]:
        """Run all layers, returning every layer's query state for auxiliary
        supervision. Padded tokens are masked out of cross-attention."""
        if len(tokens) == 0 or not tokens.valid.any():
            raise NumericsError("empty scene tokens")
        # Canonicalize token order (valid rows first, lexicographic coords):
        # decode output is then bitwise-independent of input token order.
        c = tokens.coords_idx
        perm = np.lexsort((c[:, 2], c[:, 1], c[:, 0], ~tokens.valid))
        tok = ad.gather_rows(tokens.tokens, perm)
        kp = ad.gather_rows(key_pos, perm) if key_pos is not None else None
        invalid = ~tokens.valid[perm]
        nq = content.shape[0]
        cross_mask = None
        if invalid.any():
            cross_mask = np.broadcast_to(invalid, (nq, len(tokens))).copy()
        states: list[Tensor] = []
        x = content
        for i, layer in enumerate(self.layers):
            layer_kp = kp if (key_pos_every_layer or i == 0) else None
            x = layer(x, query_pos, tok, layer_kp, self_mask, cross_mask)
            states.append(x)
        return states


class PredictionHeads(Module):
    """Per-query box parameter and class heads.

    center = reference point + regressed offset in normalized units; size
    via exp(log-size); yaw via atan2 of a regressed (sin, cos) pair.
    """

    def __init__(self, d_model: int, num_classes: int, codec: BoxCodec,
                 rng: np.random.Generator):
        self.codec = codec
        self.num_classes = num_classes
        self.center_h = Linear(d_model, d_model, rng)
        self.center_o = Linear(d_model, 3, rng, zero_init=True)
        self.size_h = Linear(d_model, d_model, rng)
        self.size_o = Linear(d_model, 3, rng, zero_init=True)
        self.yaw_h = Linear(d_model, d_model, rng)
        self.yaw_o = Linear(d_model, 2, rng, zero_init=True)
        self.vel_h = Linear(d_model, d_model, rng)
        self.vel_o = Linear(d_model, 2, rng, zero_init=True)
        self.cls = Linear(d_model, num_classes, rng, bias_init=-2.0)

    def __call__(self, state: Tensor, ref_points: Tensor) -> RawPrediction:
        offset = self.center_o(ad.relu(self.center_h(state)))
        center_norm = ad.add(ref_points, offset)
        return RawPrediction(
            center_norm=center_norm,
            log_size=self.size_o(ad.relu(self.size_h(state))),
            yaw_sc=self.yaw_o(ad.relu(self.yaw_h(state))),
            velocity=self.vel_o(ad.relu(self.vel_h(state))),
            logits=self.cls(state),
        )

    def materialize(self, raw: RawPrediction) -> DetectionSet:
        """Detach a RawPrediction into concrete boxes with scores."""
        center = self.codec.denorm_center(raw.center_norm).data
        size = np.exp(np.clip(raw.log_size.data, -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
        yaw = np.arctan2(raw.yaw_sc.data[:, 0], raw.yaw_sc.data[:, 1])
        vel = raw.velocity.data
        probs = 1.0 / (1.0 + np.exp(-raw.logits.data))
        cls_id = probs.argmax(axis=1)
        score = probs.max(axis=1)
        boxes = [
            Box3D(center=tuple(center[i]), size=tuple(size[i]), yaw=float(yaw[i]),
                  velocity=tuple(vel[i]), class_id=int(cls_id[i]),
                  score=float(score[i]))
            for i in range(len(center))
        ]
        return DetectionSet(boxes=boxes, logits=raw.logits.data.copy())


def _clamped_probs(logits: np.ndarray) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-logits))
    return np.clip(p, 1e-7, 1.0 - 1e-7)


def matching_cost(raw: RawPrediction, targets: np.ndarray, gt_classes: np.ndarray,
                  codec: BoxCodec, lambda_cls: float, lambda_reg: float,
                  gamma: float, alpha: float) -> np.ndarray:
    """Focal-style class cost plus mean-L1 regression cost, [Nq, G] numpy."""
    p = _clamped_probs(raw.logits.data)[:, gt_classes]  # [Nq, G]
    pos = alpha * (1.0 - p) ** gamma * (-np.log(p))
    neg = (1.0 - alpha) * p**gamma * (-np.log(1.0 - p))
    cls_cost = pos - neg
    pred_vec = raw.regression_vector(codec).data  # [Nq, 10]
    # L1 summed over the 10 box parameters (the convention the default
    # lambda weights are calibrated for)
    reg_cost = np.abs(pred_vec[:, None, :] - targets[None, :, :]).sum(axis=2)
    return lambda_cls * cls_cost + lambda_reg * reg_cost


def _focal_sum(logits: Tensor, target_onehot: np.ndarray, gamma: float,
               alpha: float) -> Tensor:
    p = ad.clip(ad.sigmoid(logits), 1e-7, 1.0 - 1e-7)
    one_minus_p = ad.add_const(ad.neg(p), 1.0)
    t = Tensor(target_onehot)
    pos = ad.mul(t, ad.mul(ad.pow_const(one_minus_p, gamma), ad.neg(ad.log(p))))
    neg = ad.mul(Tensor(1.0 - target_onehot),
                 ad.mul(ad.pow_const(p, gamma), ad.neg(ad.log(one_minus_p))))
    return ad.total(ad.add(ad.scale(pos, alpha), ad.scale(neg, 1.0 - alpha)))


def _l1_matched(pred_vec: Tensor, targets: np.ndarray,
                pairs: list[tuple[int, int]]) -> Tensor:
    """Per-pair L1 summed over the 10 box parameters, averaged over pairs."""
    rows = np.array([q for q, _ in pairs], dtype=np.int64)
    cols = np.array([g for _, g in pairs], dtype=np.int64)
    diff = ad.sub(ad.gather_rows(pred_vec, rows), Tensor(targets[cols]))
    return ad.scale(ad.total(ad.absolute(diff)), 1.0 / max(len(pairs), 1))


def detection_loss(layer_preds: list[RawPrediction], gt: list[Box3D],
                   codec: BoxCodec, num_classes: int, lambda_cls: float = 2.0,
                   lambda_reg: float = 0.25, gamma: float = 2.0,
                   alpha: float = 0.25, cost_cls: float | None = None,
                   cost_reg: float | None = None):
    """Bipartite-matching set loss summed over decoder layers.

    Classification is focal over every query (unmatched queries regress to
    all-background); regression is mean L1 over matched pairs in the
    codec's normalized space. The matching cost may weight its terms
    differently from the loss (cost_cls/cost_reg); a locality-heavy cost
    keeps assignments spatially stable while the class head is still
    uncommitted. Returns (total, components) with detached floats for
    logging.
    """
    if not layer_preds:
        raise ConfigError("detection_loss needs at least one layer output")
    g = len(gt)
    targets = codec.encode_gt(gt) if g else np.zeros((0, 10))
    gt_classes = np.array([b.class_id for b in gt], dtype=np.int64)
    cost_cls = lambda_cls if cost_cls is None else cost_cls
    cost_reg = lambda_reg if cost_reg is None else cost_reg
    total = None
    cls_total = 0.0
    reg_total = 0.0
    for raw in layer_preds:
        nq = raw.logits.shape[0]
        onehot = np.zeros((nq, num_classes))
        if g:
            cost = matching_cost(raw, targets, gt_classes, codec,
                                 cost_cls, cost_reg, gamma, alpha)
            match = hungarian_match(cost)
            for q, t in match.pairs:
                onehot[q, gt_classes[t]] = 1.0
        cls_loss = ad.scale(_focal_sum(raw.logits, onehot, gamma, alpha),
                            1.0 / max(g, 1))
        layer_loss = ad.scale(cls_loss, lambda_cls)
        cls_total += cls_loss.item()
        if g:
            reg_loss = _l1_matched(raw.regression_vector(codec), targets,
                                   match.pairs)
            layer_loss = ad.add(layer_loss, ad.scale(reg_loss, lambda_reg))
            reg_total += reg_loss.item()
        total = layer_loss if total is None else ad.add(total, layer_loss)
    return total, {"cls": cls_total, "reg": reg_total}


def denoise_loss(layer_preds: list[RawPrediction], gt: list[Box3D],
                 codec: BoxCodec, num_classes: int, lambda_cls: float = 2.0,
                 lambda_reg: float = 0.25, gamma: float = 2.0,
                 alpha: float = 0.25):
    """Auxiliary-query supervision: aux query i regresses ground-truth box
    i mod G directly (one block of G queries per denoising group), no
    matching."""
    g = len(gt)
    if g == 0 or not layer_preds:
        return None, {"dn_cls": 0.0, "dn_reg": 0.0}
    n_aux = layer_preds[0].logits.shape[0]
    targets = codec.encode_gt(gt)
    gt_classes = np.array([b.class_id for b in gt], dtype=np.int64)
    onehot = np.zeros((n_aux, num_classes))
    onehot[np.arange(n_aux), gt_classes[np.arange(n_aux) % g]] = 1.0
    pairs = [(i, i % g) for i in range(n_aux)]
    total = None
    cls_total = 0.0
    reg_total = 0.0
    for raw in layer_preds:
        cls_loss = ad.scale(_focal_sum(raw.logits, onehot, gamma, alpha),
                            1.0 / n_aux)
        reg_loss = _l1_matched(raw.regression_vector(codec), targets, pairs)
        layer_loss = ad.add(ad.scale(cls_loss, lambda_cls),
                            ad.scale(reg_loss, lambda_reg))
        cls_total += cls_loss.item()
        reg_total += reg_loss.item()
        total = layer_loss if total is None else ad.add(total, layer_loss)
    return total, {"dn_cls": cls_total, "dn_reg": reg_total}


def query_denoise(gt: list[Box3D], noise_scale: float, codec: BoxCodec,
                  rng: np.random.Generator, training: bool = True,
                  groups: int = 1) -> np.ndarray:
    """Noisy normalized reference points seeded from ground-truth centers,
    ``groups`` independent auxiliary queries per box. Training-only."""
    if not training:
        raise ConfigError("query_denoise is a training-only operation")
    if not gt or groups < 1:
        return np.zeros((0, 3))
    centers = np.tile(np.array([b.center for b in gt]), (groups, 1))
    half = np.tile(np.array([b.size for b in gt]), (groups, 1)) / 2.0
    noise = rng.uniform(-1.0, 1.0, size=centers.shape) * noise_scale * half
    noisy = centers + noise
    norm = (noisy - np.asarray(codec.range_min)) / codec.span
    return np.clip(norm, 0.0, 1.0)


def group_mask(n_normal: int, n_aux: int, group_size: int = 0) -> np.ndarray | None:
    """Self-attention mask blocking attention between the normal queries and
    every auxiliary denoising group (and between distinct groups), both ways."""
    if n_aux == 0:
        return None
    n = n_normal + n_aux
    gid = np.zeros(n, dtype=np.int64)
    if group_size <= 0:
        group_size = n_aux
    for g, start in enumerate(range(n_normal, n, group_size), start=1):
        gid[start:start + group_size] = g
    return gid[:, None] != gid[None, :]
