"""Full detector assembly: sparse encoder, explicit camera fusion, windowed
refinement, elimination, and the set-prediction decoder, wired per RunConfig."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, DetectionSet
from .config import RunConfig
from .decoder import (BoxCodec, PredictionHeads, RawPrediction,
                      TransformerDecoder, group_mask, query_denoise)
from .elimination import EliminationConfig, ScoreHead, label_tokens, pad_tokens, topk_select
from .embedding import (EmbeddedTokenSet, PositionalEmbedding, QuerySet,
                        embed_tokens, init_queries)
from .exceptions import ConfigError
from .geometry import fuse_concat, image_features_with_validity
from .numerics import Linear, Module, Tensor, load_checkpoint, save_checkpoint
from .numerics import autodiff as ad
from .scenegen import Scene
from .voxels import SparseEncoder, SparseVoxelSet, downsample_coords, voxel_to_sparse
from .window_refine import DeepFusionModule


@dataclass
class ForwardOutput:
    """Per-layer head outputs (normal queries), denoising-query outputs
    (training only), and the full pre-selection foreground scores."""

    layer_preds: list
    aux_preds: list | None
    fg_scores: Tensor
    token_centers: np.ndarray
    kept_tokens: int


def _gate_scores(ds: DetectionSet, token_centers: np.ndarray,
                 fg_scores: np.ndarray, radius: float) -> None:
    """Scale each detection's score by the best foreground evidence within
    ``radius`` meters of its center. A query whose predicted center sits in
    token-free or background-scored space cannot rank above real objects.

    Uses the full pre-selection token set, so gating is identical whether
    elimination keeps all tokens or none are eliminated at all.
    """
    if len(token_centers) == 0:
        for b in ds.boxes:
            b.score = 0.0
        return
    from scipy.spatial import cKDTree

    tree = cKDTree(token_centers)
    centers = np.array([b.center for b in ds.boxes])
    neighborhoods = tree.query_ball_point(centers, r=radius)
    for box, idx in zip(ds.boxes, neighborhoods):
        gate = float(fg_scores[idx].max()) if idx else 0.0
        box.score = float(box.score) * gate


@dataclass
class ScenePrep:
    """Weight-independent per-scene inputs, cached across training steps.

    Final-level coordinates are a pure function of level-0 coordinates, so
    image features sampled at those coordinates are static too.
    """

    sparse0: SparseVoxelSet
    image_feats: np.ndarray | None  # [M_final, C_img + 1] or None without fusion
    fg_labels: np.ndarray           # [M_final] binary foreground labels
    gt_boxes: list[Box3D]


def final_coords(cfg: RunConfig, sparse0: SparseVoxelSet):
    coords = sparse0.coords
    res = sparse0.resolution
    cum = np.ones(3, dtype=np.int64)
    for stride in cfg.stages:
        coords, _, _, res = downsample_coords(coords, res, stride)
        cum *= np.asarray(stride, dtype=np.int64)
    return coords, res, cum


class DetectionModel(Module):
    """End-to-end sparse-voxel detector. Thread-safe for concurrent reads
    once frozen; training mutates parameters only through optimizer steps."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.codec = BoxCodec(cfg.grid_range_min, cfg.grid_range_max, cfg.vel_scale)
        self.encoder = SparseEncoder(cfg.feat_dim(), list(cfg.stages),
                                     list(cfg.stage_widths), rng)
        d_l = cfg.stage_widths[-1]
        img_extra = cfg.c_img + 1 if cfg.fusion else 0
        self.pos_embed = PositionalEmbedding(cfg.d_model, rng)
        ffn_dim = cfg.d_model * cfg.ffn_mult
        if cfg.dfm_placement == "fused":
            self.input_proj = Linear(d_l + img_extra, cfg.d_model, rng)
            self.fuse_proj = None
        else:
            self.input_proj = Linear(d_l, cfg.d_model, rng)
            self.fuse_proj = (Linear(cfg.d_model + img_extra, cfg.d_model, rng)
                              if cfg.fusion else None)
        self.dfm = DeepFusionModule(cfg.d_model, cfg.dfm_blocks, cfg.dfm_window,
                                    cfg.dfm_set_size, cfg.dfm_shift, ffn_dim, rng)
        self.elim_head = ScoreHead(cfg.d_model, rng)
        self.queries: QuerySet = init_queries(cfg.num_queries, cfg.d_model, cfg.seed)
        self.decoder = TransformerDecoder(cfg.d_model, cfg.decoder_layers, ffn_dim, rng)
        self.heads = PredictionHeads(cfg.d_model, cfg.num_classes, self.codec, rng)
        self.elim_cfg = EliminationConfig(k=cfg.elim_k, dilation=cfg.elim_dilation,
                                          gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)

    # ---------------------------------------------------------------- prep

    def prepare_scene(self, scene: Scene) -> ScenePrep:
        cfg = self.cfg
        grid = cfg.grid()
        sparse0 = voxel_to_sparse(scene.points.astype(np.float64), grid, cfg.encoding)
        coords, res, cum = final_coords(cfg, sparse0)
        centers = (np.asarray(grid.range_min)
                   + (coords + 0.5) * np.asarray(grid.voxel_size) * cum)
        img = None
        if cfg.fusion:
            if scene.c_img != cfg.c_img:
                raise ConfigError(
                    f"scene c_img={scene.c_img} but config expects {cfg.c_img}"
                )
            final_set = SparseVoxelSet(coords, Tensor(np.zeros((len(coords), 1))),
                                       grid, level=len(cfg.stages),
                                       cum_stride=tuple(int(v) for v in cum),
                                       resolution=res)
            img = image_features_with_validity(scene.image_maps, scene.cameras,
                                               final_set).data
        labels = label_tokens(centers, scene.gt_boxes, cfg.elim_dilation)
        return ScenePrep(sparse0=sparse0, image_feats=img, fg_labels=labels,
                         gt_boxes=scene.gt_boxes)

    # ------------------------------------------------------------- forward

    def forward(self, prep: ScenePrep, train: bool = False,
                rng: np.random.Generator | None = None):
        """Returns (layer_preds, aux_preds, scores, selected_valid_count).

        layer_preds are the normal queries' RawPredictions per decoder
        layer; aux_preds (denoising) is None outside training.
        """
        cfg = self.cfg
        x = self.encoder(prep.sparse0)
        if cfg.fusion and cfg.dfm_placement == "fused":
            x = fuse_concat(x, Tensor(prep.image_feats))
        emb = embed_tokens(x, self.input_proj, self.pos_embed)
        emb = self.dfm.refine(emb)
        if cfg.dfm_placement == "lidar" and cfg.fusion:
            fused = ad.concat([emb.tokens, Tensor(prep.image_feats)], axis=1)
            emb = EmbeddedTokenSet(self.fuse_proj(fused), emb.coords_m,
                                   emb.coords_idx, emb.valid)
        scores = self.elim_head(emb.tokens)
        if cfg.elimination:
            k = self.elim_cfg.resolve_k(len(emb))
            sel = topk_select(emb, scores.data, k)
            sel = pad_tokens(sel, k)
        else:
            sel = emb
        # key positions for cross-attention (zeros on padding rows, masked out)
        res = np.asarray(final_resolution(cfg), dtype=np.float64)
        norm = np.where(sel.valid[:, None], (sel.coords_idx + 0.5) / res, 0.0)
        key_pos = self.pos_embed(Tensor(norm))
        ref = self.queries.ref_points.tensor
        n_aux = 0
        if train and cfg.denoise and prep.gt_boxes:
            if rng is None:
                raise ConfigError("training forward needs an rng for denoising")
            aux = query_denoise(prep.gt_boxes, cfg.denoise_scale, self.codec, rng,
                                groups=cfg.denoise_groups)
            n_aux = aux.shape[0]
            ref = ad.concat([ref, Tensor(aux)], axis=0)
        query_pos = self.pos_embed(ref)
        mask = group_mask(cfg.num_queries, n_aux, len(prep.gt_boxes))
        states = self.decoder(sel, query_pos, query_pos, key_pos,
                              self_mask=mask,
                              key_pos_every_layer=cfg.key_pos_every_layer)
        layer_preds: list[RawPrediction] = []
        aux_preds: list[RawPrediction] | None = [] if n_aux else None
        for st in states:
            raw = self.heads(st, ref)
            layer_preds.append(raw.slice_rows(0, cfg.num_queries))
            if n_aux:
                aux_preds.append(raw.slice_rows(cfg.num_queries,
                                                cfg.num_queries + n_aux))
        return ForwardOutput(layer_preds=layer_preds, aux_preds=aux_preds,
                             fg_scores=scores, token_centers=emb.coords_m,
                             kept_tokens=int(sel.valid.sum()))

    def detect(self, scene: Scene) -> DetectionSet:
        prep = self.prepare_scene(scene)
        out = self.forward(prep, train=False)
        ds = self.heads.materialize(out.layer_preds[-1])
        if self.cfg.score_gate_radius > 0:
            _gate_scores(ds, out.token_centers, out.fg_scores.data,
                         self.cfg.score_gate_radius)
        return ds

    # --------------------------------------------------------- persistence

    def save(self, path: str) -> None:
        save_checkpoint(path, [(name, p.data) for name, p in self.named_parameters()])

    def load(self, path: str) -> None:
        blob = load_checkpoint(path)
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(blob))
        extra = sorted(set(blob) - set(own))
        if missing or extra:
            raise ConfigError(
                f"checkpoint/model parameter mismatch; missing={missing[:3]} "
                f"extra={extra[:3]}"
            )
        for name, p in own.items():
            if p.data.shape != blob[name].shape:
                raise ConfigError(
                    f"parameter '{name}' shape {blob[name].shape} != {p.data.shape}"
                )
            p.data = blob[name]


def final_resolution(cfg: RunConfig) -> tuple[int, int, int]:
    res = np.asarray(cfg.grid().resolution, dtype=np.int64)
    for s in cfg.stages:
        res = -(-res // np.asarray(s, dtype=np.int64))
    return tuple(int(v) for v in res)
