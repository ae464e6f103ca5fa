"""Seed-deterministic training loop, loss assembly, and batch detection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .decoder import denoise_loss, detection_loss
from .elimination import focal_loss
from .exceptions import NumericsError
from .model import DetectionModel, ScenePrep
from .numerics import Adam, SGD, clip_grad_norm, cyclic_lr
from .numerics import autodiff as ad
from .scenegen import Scene

LOG_COLUMNS = ("step", "lr", "total", "cls", "reg", "elim", "dn_cls", "dn_reg")


@dataclass
class TrainResult:
    model: DetectionModel
    history: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")

    @property
    def initial_loss(self) -> float:
        return self.history[0]["total"] if self.history else float("nan")


def compute_losses(model: DetectionModel, prep: ScenePrep, step_rng):
    """One training forward plus all loss terms; returns (total, row)."""
    cfg = model.cfg
    out = model.forward(prep, train=True, rng=step_rng)
    layer_preds, aux_preds, scores = out.layer_preds, out.aux_preds, out.fg_scores
    total, comps = detection_loss(layer_preds, prep.gt_boxes, model.codec,
                                  cfg.num_classes, cfg.lambda_cls, cfg.lambda_reg,
                                  cfg.focal_gamma, cfg.focal_alpha,
                                  cost_cls=cfg.match_cost_cls,
                                  cost_reg=cfg.match_cost_reg)
    row = {"cls": comps["cls"], "reg": comps["reg"], "dn_cls": 0.0, "dn_reg": 0.0}
    if aux_preds:
        dn_total, dn_comps = denoise_loss(aux_preds, prep.gt_boxes, model.codec,
                                          cfg.num_classes, cfg.lambda_cls,
                                          cfg.lambda_reg, cfg.focal_gamma,
                                          cfg.focal_alpha)
        if dn_total is not None:
            total = ad.add(total, dn_total)
            row.update(dn_comps)
    elim = focal_loss(scores, prep.fg_labels, cfg.focal_gamma, cfg.focal_alpha)
    total = ad.add(total, ad.scale(elim, cfg.lambda_elim))
    row["elim"] = elim.item()
    row["total"] = total.item()
    return total, row


def train(cfg: RunConfig, scenes: list[Scene], log_path: str | None = None,
          checkpoint_path: str | None = None,
          progress: bool = False) -> TrainResult:
    """Train for cfg.steps, cycling scenes in order. Deterministic given the
    config seed; a non-finite loss raises NumericsError with the log intact."""
    if not scenes:
        raise NumericsError("no scenes to train on")
    model = DetectionModel(cfg)
    preps = [model.prepare_scene(s) for s in scenes]
    params = list(model.parameters())
    opt = (Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr))
    history: list[dict] = []
    writer = None
    log_file = None
    if log_path:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    try:
        for step in range(cfg.steps):
            prep = preps[step % len(preps)]
            if cfg.lr_schedule == "cyclic":
                opt.lr = cyclic_lr(step, cfg.steps, cfg.lr,
                                   cfg.cyclic_peak_ratio, cfg.cyclic_end_ratio)
            step_rng = np.random.default_rng([cfg.seed, step])
            total, row = compute_losses(model, prep, step_rng)
            row["step"] = step
            row["lr"] = opt.lr
            history.append(row)
            if writer:
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            if not math.isfinite(row["total"]):
                raise NumericsError(f"non-finite loss at step {step}")
            model.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            model.queries.clamp_()
            if (checkpoint_path and cfg.save_every
                    and (step + 1) % cfg.save_every == 0):
                model.save(checkpoint_path)
            if progress and (step % 100 == 0 or step == cfg.steps - 1):
                print(f"step {step}: total={row['total']:.4f} cls={row['cls']:.4f} "
                      f"reg={row['reg']:.4f} elim={row['elim']:.4f}", flush=True)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        model.save(checkpoint_path)
    return TrainResult(model=model, history=history)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def detect_scenes(model: DetectionModel, scenes: list[Scene]):
    return [model.detect(s) for s in scenes]
