"""Detection metrics (distance-matched AP, range-banded AP, simplified
composite score) and sparsity analytics over voxel occupancy."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D, DetectionSet
from .exceptions import ConfigError
from .voxels import GridConfig, occupancy_per_level, voxelize


@dataclass(frozen=True)
class EvalConfig:
    """Matching thresholds are BEV center distances in meters."""

    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    range_bands: tuple[tuple[float, float], ...] = ((0.0, 18.0), (18.0, 36.0), (36.0, 54.0))
    score_floor: float = 0.0
    tp_error_threshold: float = 2.0
    error_norms: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if list(self.thresholds) != sorted(self.thresholds) or min(self.thresholds) <= 0:
            raise ConfigError("thresholds must be positive and ascending")
        bands = sorted(self.range_bands)
        for (a0, a1), (b0, b1) in zip(bands, bands[1:]):
            if b0 < a1:
                raise ConfigError("range bands overlap")
        if any(b[1] <= b[0] for b in self.range_bands):
            raise ConfigError("empty range band")


def _bev_dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _greedy_match(preds: list[tuple[int, Box3D]], gts: list[tuple[int, Box3D]],
                  threshold: float):
    """Match score-descending predictions to the nearest unmatched GT of the
    same scene within the distance threshold.

    preds/gts are (scene_idx, box) pairs; predictions must already be sorted
    by descending score with input-order tie-break. Returns (tp flags per
    prediction, list of (pred_idx, gt_idx) matches).
    """
    matched_gt: set[int] = set()
    by_scene: dict[int, list[int]] = {}
    for gi, (si, _) in enumerate(gts):
        by_scene.setdefault(si, []).append(gi)
    tp = np.zeros(len(preds), dtype=bool)
    matches: list[tuple[int, int]] = []
    for pi, (si, pbox) in enumerate(preds):
        best_gi, best_d = -1, threshold
        for gi in by_scene.get(si, ()):
            if gi in matched_gt:
                continue
            d = _bev_dist(pbox.center, gts[gi][1].center)
            if d <= best_d:
                best_d, best_gi = d, gi
        if best_gi >= 0:
            matched_gt.add(best_gi)
            tp[pi] = True
            matches.append((pi, best_gi))
    return tp, matches


def _interp_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under precision-recall via 101-point interpolation."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / n_gt
    levels = np.linspace(0.0, 1.0, 101)
    ap = 0.0
    for r in levels:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _class_items(preds: list[DetectionSet], gts: list[list[Box3D]], cls: int,
                 score_floor: float):
    pred_items = []
    for si, ds in enumerate(preds):
        for b in ds.boxes:
            if b.class_id == cls and (b.score or 0.0) >= score_floor:
                pred_items.append((si, b))
    # stable by descending score; ties keep (scene, box) input order
    pred_items.sort(key=lambda it: -(it[1].score or 0.0))
    gt_items = [(si, b) for si, boxes in enumerate(gts) for b in boxes
                if b.class_id == cls]
    return pred_items, gt_items


def average_precision(preds: list[DetectionSet], gts: list[list[Box3D]],
                      cls: int, threshold: float,
                      score_floor: float = 0.0) -> float:
    """AP for one class at one distance threshold; NaN when the class never
    appears in the ground truth."""
    if threshold <= 0:
        raise ConfigError("threshold must be positive")
    pred_items, gt_items = _class_items(preds, gts, cls, score_floor)
    if not gt_items:
        return float("nan")
    tp, _ = _greedy_match(pred_items, gt_items, threshold)
    return _interp_ap(tp, len(gt_items))


def mean_ap(preds: list[DetectionSet], gts: list[list[Box3D]], num_classes: int,
            cfg: EvalConfig = EvalConfig()) -> tuple[float, dict]:
    """Mean over classes present in GT and over all thresholds.

    Classes absent from the ground truth are excluded with a warning.
    """
    table: dict[str, float] = {}
    vals = []
    for cls in range(num_classes):
        for thr in cfg.thresholds:
            ap = average_precision(preds, gts, cls, thr, cfg.score_floor)
            table[f"ap/class{cls}@{thr}"] = ap
            if math.isnan(ap):
                continue
            vals.append(ap)
        if all(math.isnan(table[f"ap/class{cls}@{t}"]) for t in cfg.thresholds):
            warnings.warn(f"class {cls} absent from ground truth; excluded from mAP")
    m = float(np.mean(vals)) if vals else 0.0
    return m, table


def map_at(preds, gts, num_classes: int, threshold: float,
           score_floor: float = 0.0) -> float:
    """Mean AP over GT-present classes at a single threshold."""
    vals = [average_precision(preds, gts, c, threshold, score_floor)
            for c in range(num_classes)]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else 0.0


def range_wise_eval(preds: list[DetectionSet], gts: list[list[Box3D]],
                    num_classes: int, cfg: EvalConfig = EvalConfig()) -> dict:
    """Bucket GT and predictions by BEV center distance and evaluate each
    band independently. Bands with no GT are reported as absent (None)."""
    out: dict[str, dict] = {}
    for lo, hi in cfg.range_bands:
        def in_band(b: Box3D) -> bool:
            d = b.bev_distance()
            return lo <= d < hi
        band_gts = [[b for b in boxes if in_band(b)] for boxes in gts]
        band_preds = [DetectionSet([b for b in ds.boxes if in_band(b)])
                      for ds in preds]
        key = f"{lo:g}-{hi:g}m"
        if not any(band_gts):
            out[key] = {"map": None, "gt_count": 0}
            continue
        m, table = mean_ap(band_preds, band_gts, num_classes, cfg)
        out[key] = {"map": m, "gt_count": sum(len(b) for b in band_gts),
                    "table": table}
    return out


def _tp_errors(preds, gts, num_classes: int, cfg: EvalConfig):
    """Pooled translation/scale/orientation/velocity errors over true
    positives matched at the TP threshold."""
    errs = {"trans": [], "scale": [], "orient": [], "vel": []}
    for cls in range(num_classes):
        pred_items, gt_items = _class_items(preds, gts, cls, cfg.score_floor)
        if not gt_items:
            continue
        _, matches = _greedy_match(pred_items, gt_items, cfg.tp_error_threshold)
        for pi, gi in matches:
            p, g = pred_items[pi][1], gt_items[gi][1]
            errs["trans"].append(_bev_dist(p.center, g.center))
            ratio = np.prod(np.minimum(p.size, g.size)) / np.prod(np.maximum(p.size, g.size))
            errs["scale"].append(1.0 - float(ratio))
            dyaw = abs(p.yaw - g.yaw) % (2.0 * math.pi)
            errs["orient"].append(min(dyaw, 2.0 * math.pi - dyaw))
            errs["vel"].append(math.hypot(p.velocity[0] - g.velocity[0],
                                          p.velocity[1] - g.velocity[1]))
    return errs


def nds_simplified(preds: list[DetectionSet], gts: list[list[Box3D]],
                   num_classes: int, cfg: EvalConfig = EvalConfig()) -> tuple[float, dict]:
    """(4*mAP + sum of four bounded TP-error terms) / 8.

    Each term is 1 - min(1, err / err_norm); with zero true positives every
    term contributes its worst case, 0.
    """
    m, _ = mean_ap(preds, gts, num_classes, cfg)
    errs = _tp_errors(preds, gts, num_classes, cfg)
    detail = {"map": m}
    total = 4.0 * m
    for (key, values), norm in zip(errs.items(), cfg.error_norms):
        if values:
            err = float(np.mean(values))
            term = 1.0 - min(1.0, err / norm)
        else:
            err, term = float("inf"), 0.0
        detail[f"err/{key}"] = err
        detail[f"term/{key}"] = term
        total += term
    score = total / 8.0
    detail["nds_simplified"] = score
    return score, detail


@dataclass
class SparsityReport:
    """Occupancy statistics across scenes for one grid + stage config."""

    levels: int
    per_scene_counts: list[list[int]]
    final_resolution: tuple[int, int, int]
    bev_cell_count: int
    hist_edges: list[float] = field(default_factory=list)
    hist_counts: list[int] = field(default_factory=list)
    elimination_k: float | None = None

    @property
    def final_counts(self) -> list[int]:
        return [c[-1] for c in self.per_scene_counts]

    @property
    def mean_final(self) -> float:
        return float(np.mean(self.final_counts)) if self.per_scene_counts else 0.0

    @property
    def median_final(self) -> float:
        return float(np.median(self.final_counts)) if self.per_scene_counts else 0.0

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "per_scene_counts": self.per_scene_counts,
            "final_resolution": list(self.final_resolution),
            "bev_cell_count": self.bev_cell_count,
            "mean_final": self.mean_final,
            "median_final": self.median_final,
            "bev_ratio": (self.mean_final / self.bev_cell_count
                          if self.bev_cell_count else None),
            "hist_edges": self.hist_edges,
            "hist_counts": self.hist_counts,
            "elimination_k": self.elimination_k,
        }


def sparsity_report(point_clouds: list[np.ndarray], grid: GridConfig,
                    stages, elimination_k: float | None = None,
                    hist_bins: int = 12) -> SparsityReport:
    """Voxel occupancy per downsampling level for each scene's points."""
    if not point_clouds:
        raise ConfigError("sparsity_report needs at least one scene")
    res = grid.resolution
    counts = []
    for pts in point_clouds:
        cells = voxelize(pts, grid)
        coords = np.array(sorted(cells.keys()), dtype=np.int64).reshape(-1, 3)
        counts.append(occupancy_per_level(coords, res, stages))
    final_res = res
    for s in stages:
        final_res = tuple(int(v) for v in -(-np.asarray(final_res) // np.asarray(s)))
    finals = [c[-1] for c in counts]
    hist, edges = np.histogram(finals, bins=hist_bins)
    return SparsityReport(levels=len(stages) + 1, per_scene_counts=counts,
                          final_resolution=final_res,
                          bev_cell_count=int(final_res[0] * final_res[1]),
                          hist_edges=[float(e) for e in edges],
                          hist_counts=[int(h) for h in hist],
                          elimination_k=elimination_k)


def write_sparsity_outputs(report: SparsityReport, json_path: str,
                           csv_path: str, image_path: str | None = None) -> None:
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene"] + [f"level{i}" for i in range(report.levels)])
        for i, row in enumerate(report.per_scene_counts):
            writer.writerow([i] + row)
    if image_path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        finals = report.final_counts
        ax.hist(finals, bins=report.hist_edges or 12, color="#4878cf",
                edgecolor="white")
        ax.axvline(report.bev_cell_count, color="red", linestyle="--",
                   label=f"BEV cells ({report.bev_cell_count})")
        ax.axvline(report.mean_final, color="blue", linestyle=":",
                   label=f"mean ({report.mean_final:.0f})")
        ax.set_xlabel("occupied cells at final level")
        ax.set_ylabel("scenes")
        ax.legend()
        fig.tight_layout()
        fig.savefig(image_path)
        plt.close(fig)
