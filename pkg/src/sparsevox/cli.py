"""Command-line surface: scene generation, sparsity analysis, training,
inference, evaluation, and geometry self-checks.

Exit codes: 0 success, 2 I/O or configuration problems, 3 numeric failure
(non-finite loss), 4 checkpoint format version mismatch. Commands are
single-process and deterministic given identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (RunConfig, config_hash, config_keys_help, load_config,
                     parse_config, serialize_config)
from .exceptions import (CheckpointVersionError, ConfigError, NumericsError,
                         SceneGenError, SparseVoxError)
from .geometry import back_project, project
from .metrics import EvalConfig, mean_ap, nds_simplified, range_wise_eval, sparsity_report, write_sparsity_outputs
from .model import DetectionModel
from .scenegen import (SceneSpec, load_manifest, load_scene,
                       make_camera_only_classes, generate_dataset, spec_from_dict)
from .training import detect_scenes, train
from .boxes import Box3D, DetectionSet

EXIT_OK = 0
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_VERSION = 4


def _metadata(cfg: RunConfig | None, seed: int | None) -> dict:
    meta = {"code_version": __version__}
    if cfg is not None:
        meta["config_hash"] = config_hash(cfg)
        meta["seed"] = cfg.seed
    if seed is not None:
        meta["seed"] = seed
    return meta


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_scenes(scenes_dir: str):
    _, files = load_manifest(scenes_dir)
    return [load_scene(p) for p in files]


# ----------------------------------------------------------------- commands

def cmd_gen_scenes(args) -> int:
    spec = SceneSpec(seed=args.seed)
    if args.spec:
        with open(args.spec) as f:
            spec = spec_from_dict(json.load(f))
    if args.camera_only_classes:
        spec = make_camera_only_classes(spec)
    os.makedirs(args.out, exist_ok=True)
    if not os.access(args.out, os.W_OK):
        raise OSError(f"output directory {args.out} is not writable")
    manifest = generate_dataset(args.out, spec, args.count, args.seed)
    print(f"wrote {args.count} scenes and {manifest}")
    return EXIT_OK


def cmd_analyze_sparsity(args) -> int:
    scenes = _load_scenes(args.scenes)
    base = RunConfig()
    voxel = tuple(float(v) for v in args.voxel_size.split(",")) if args.voxel_size \
        else (0.075, 0.075, 0.2)
    stages = (tuple(tuple(int(v) for v in part.split("x"))
                    for part in args.stages.split(","))
              if args.stages else ((2, 2, 2), (2, 2, 2), (2, 2, 1)))
    grid = RunConfig(voxel_size=voxel, stages=stages,
                     stage_widths=tuple(8 for _ in stages)).grid()
    report = sparsity_report([s.points for s in scenes], grid, stages)
    os.makedirs(args.out, exist_ok=True)
    write_sparsity_outputs(
        report,
        os.path.join(args.out, "sparsity.json"),
        os.path.join(args.out, "sparsity.csv"),
        None if args.no_image else os.path.join(args.out, "sparsity.png"),
    )
    ratio = report.mean_final / report.bev_cell_count
    print(f"scenes: {len(scenes)}")
    print(f"mean occupied cells (final level): {report.mean_final:.1f}")
    print(f"BEV cell count: {report.bev_cell_count}")
    print(f"sparse/BEV ratio: {ratio:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config)
    for kv in args.set or []:
        cfg = parse_config(kv.replace("=", " = ", 1), base=cfg)
    if args.save_every is not None:
        cfg = parse_config(f"save_every = {args.save_every}", base=cfg)
    scenes = _load_scenes(args.scenes)
    log_path = args.log or args.out + ".loss.csv"
    try:
        train(cfg, scenes, log_path=log_path, checkpoint_path=args.out,
              progress=args.progress)
    except NumericsError as exc:
        print(f"error: {exc} (loss log preserved at {log_path})", file=sys.stderr)
        return EXIT_NUMERIC
    with open(args.out + ".config", "w") as f:
        f.write(serialize_config(cfg))
    print(f"checkpoint: {args.out}")
    print(f"loss log:   {log_path}")
    return EXIT_OK


def _detections_doc(cfg: RunConfig, scene_names, det_sets) -> dict:
    return {
        "metadata": _metadata(cfg, None),
        "scenes": [
            {"scene": name, "detections": [b.to_dict() for b in ds.boxes]}
            for name, ds in zip(scene_names, det_sets)
        ],
    }


def cmd_detect(args) -> int:
    config_path = args.config or args.ckpt + ".config"
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"no config next to checkpoint: {config_path}")
    cfg = load_config(config_path)
    model = DetectionModel(cfg)
    model.load(args.ckpt)
    _, files = load_manifest(args.scenes)
    scenes = [load_scene(p) for p in files]
    det_sets = detect_scenes(model, scenes)
    doc = _detections_doc(cfg, [os.path.basename(p) for p in files], det_sets)
    _write_json(args.out, doc)
    print(f"detections: {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    with open(args.detections) as f:
        doc = json.load(f)
    _, files = load_manifest(args.scenes)
    scenes = {os.path.basename(p): load_scene(p) for p in files}
    preds, gts = [], []
    num_classes = args.num_classes
    for entry in doc["scenes"]:
        scene = scenes.get(entry["scene"])
        if scene is None:
            raise FileNotFoundError(f"scene {entry['scene']} not in {args.scenes}")
        boxes = [Box3D.from_dict(b) for b in entry["detections"]]
        preds.append(DetectionSet(boxes))
        gts.append(scene.gt_boxes)
        num_classes = max(num_classes,
                          max((b.class_id + 1 for b in scene.gt_boxes), default=0))
    ecfg = EvalConfig(score_floor=args.score_floor)
    m, table = mean_ap(preds, gts, num_classes, ecfg)
    nds, detail = nds_simplified(preds, gts, num_classes, ecfg)
    bands = range_wise_eval(preds, gts, num_classes, ecfg)
    out = {
        "metadata": doc.get("metadata", {"code_version": __version__}),
        "map": m,
        "nds_simplified": nds,
        "nds_detail": detail,
        "per_class": table,
        "range_bands": bands,
    }
    _write_json(args.out, out)
    print(f"mAP: {m:.4f}  nds_simplified: {nds:.4f}")
    for band, entry in bands.items():
        shown = "absent" if entry["map"] is None else f"{entry['map']:.4f}"
        print(f"  {band}: {shown}")
    return EXIT_OK


def cmd_project_check(args) -> int:
    _, files = load_manifest(args.scenes)
    rng = np.random.default_rng(0)
    checked = passed = unseen = 0
    max_roundtrip = 0.0
    for path in files:
        scene = load_scene(path)
        feet = scene.footprints
        for bi, box in enumerate(scene.gt_boxes):
            cams_with_footprint = [ci for ci in range(len(scene.cameras))
                                   if (ci, bi) in feet]
            if not cams_with_footprint:
                unseen += 1
                continue
            for ci in cams_with_footprint:
                u, v, depth, valid = project(box.center, scene.cameras[ci])
                u0, v0, u1, v1 = feet[(ci, bi)]
                checked += 1
                if valid and u0 <= u <= u1 and v0 <= v <= v1:
                    passed += 1
        # round-trip error on random in-range points
        pts = rng.uniform([-50, -50, -4], [50, 50, 2], size=(args.samples, 3))
        for cam in scene.cameras:
            for p in pts:
                u, v, depth, valid = project(p, cam)
                if valid:
                    err = float(np.linalg.norm(back_project(u, v, depth, cam) - p))
                    max_roundtrip = max(max_roundtrip, err)
    rate = passed / checked if checked else 1.0
    print(f"footprint checks: {passed}/{checked} passed ({rate:.1%})")
    print(f"boxes unseen by every camera: {unseen}")
    print(f"max round-trip error: {max_roundtrip:.3e} m")
    return EXIT_OK if rate == 1.0 else EXIT_NUMERIC


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sparsevox",
        description="Sparse-voxel multi-modal 3D detection on synthetic scenes.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Config file keys (flat 'key = value' lines):\n" + config_keys_help(),
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate synthetic scenes + manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", help="JSON file of SceneSpec fields")
    g.add_argument("--camera-only-classes", action="store_true",
                   help="make classes 0/1 distinguishable only via images")
    g.set_defaults(func=cmd_gen_scenes)

    a = sub.add_parser("analyze-sparsity", help="occupancy statistics per level")
    a.add_argument("--scenes", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--voxel-size", help="e.g. 0.075,0.075,0.2")
    a.add_argument("--stages", help="e.g. 2x2x2,2x2x2,2x2x1")
    a.add_argument("--no-image", action="store_true")
    a.set_defaults(func=cmd_analyze_sparsity)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--scenes", required=True)
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    t.add_argument("--save-every", type=int)
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run inference, write detections JSON")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--scenes", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config", help="config file (default: <ckpt>.config)")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--detections", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--score-floor", type=float, default=0.0)
    e.add_argument("--num-classes", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("project-check", help="projection/footprint self-test")
    c.add_argument("--scenes", required=True)
    c.add_argument("--samples", type=int, default=50,
                   help="random round-trip points per scene")
    c.set_defaults(func=cmd_project_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, OSError, ConfigError, SceneGenError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SparseVoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
