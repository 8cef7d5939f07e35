"""Command line interface.

Every subcommand reads and writes the on-disk formats from the formats
module, logs stage timings as JSON lines on stderr, and exits 0 on
success, 1 on data or I/O errors, and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import formats
from .codebook import build_codebook, relabel_masks
from .evaluation import (
    batch_f1,
    boxes_for_view,
    detection_metrics,
    mask_metrics,
    match_objects,
)
from .model import (
    STAGE_TOGGLES,
    PipelineConfig,
    config_defaults,
    config_from_dict,
)
from .render import render_depth
from .synthgen import SynthSpec, generate


def _log(event: str, **fields):
    record = {"event": event, **fields}
    print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)


class _Stage:
    """Context manager that logs the wall time of one pipeline stage."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        seconds = time.perf_counter() - self.start
        status = "failed" if exc_type else "done"
        _log("stage", name=self.name, seconds=round(seconds, 4), status=status)
        return False


# ---------------------------------------------------------------------------
# config assembly

_THRESHOLD_FLAGS = (
    "tau_overlap", "tau_filter1", "tau_spatial", "tau_filter2",
    "tau_object", "depth_bound", "near",
)


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of config overrides")
    for name in _THRESHOLD_FLAGS:
        parser.add_argument(f"--{name.replace('_', '-')}", type=float, default=None)
    parser.add_argument("--min-pts", type=int, default=None)
    parser.add_argument("--postprocess", choices=("auto", "on", "off"), default=None)
    parser.add_argument("--disable", action="append", default=[],
                        choices=sorted(STAGE_TOGGLES), metavar="STAGE",
                        help=f"disable a stage ({', '.join(sorted(STAGE_TOGGLES))})")


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the --config file, then explicit flags."""
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        cfg = config_from_dict(data)
    else:
        cfg = config_defaults()
    overrides = {}
    for name in _THRESHOLD_FLAGS:
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.min_pts is not None:
        overrides["min_pts"] = args.min_pts
    if args.postprocess is not None:
        overrides["postprocess_mode"] = args.postprocess
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    for stage in args.disable:
        cfg = cfg.disable(stage)
    return cfg.validate()


def _load_scene_and_views(args):
    with _Stage("load-scene"):
        scene = formats.read_gaussian_ply(args.scene)
    with _Stage("load-cameras"):
        views = formats.read_cameras(args.cameras)
    return scene, views


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth_gen(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec_data = json.load(fh)
    if args.seed is not None:
        spec_data["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with _Stage("generate"):
        result = generate(spec)
    with _Stage("write"):
        formats.write_gaussian_ply(result.scene, out / "scene.ply")
        formats.write_cameras(result.views, out / "cameras.json")
        masks_dir = out / "masks"
        masks_dir.mkdir(exist_ok=True)
        for view_id in sorted(result.mask_sets):
            formats.write_masks(
                result.mask_sets[view_id], masks_dir / f"{view_id}.json"
            )
        gt_dir = out / "gt"
        (gt_dir / "relabeled").mkdir(parents=True, exist_ok=True)
        for view_id in sorted(result.gt_sets):
            formats.write_relabeled(
                result.gt_sets[view_id], gt_dir / "relabeled" / f"{view_id}.json"
            )
        formats.write_boxes(result.gt_boxes, gt_dir / "boxes.json")
        with open(out / "spec.json", "w", encoding="utf-8") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    _log("summary", command="synth-gen", gaussians=len(result.scene),
         views=len(result.views), out=str(out))
    return 0


def _cmd_render_depth(args) -> int:
    scene, views = _load_scene_and_views(args)
    cfg = _resolve_config(args)
    if args.view is not None:
        views = [v for v in views if v.view_id == args.view]
        if not views:
            raise ValueError(f"no camera named {args.view!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam in views:
        with _Stage(f"render:{cam.view_id}"):
            depth = render_depth(scene, cam, cfg.near)
        formats.write_depth_raster(depth, out / f"{cam.view_id}.depth")
    _log("summary", command="render-depth", views=len(views), out=str(out))
    return 0


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _cmd_build(args) -> int:
    scene, views = _load_scene_and_views(args)
    cfg = _resolve_config(args)
    with _Stage("load-masks"):
        mask_sets = formats.read_mask_dir(args.masks)
    with _Stage("build-codebook"):
        codebook, warnings = build_codebook(
            scene, views, mask_sets, cfg, workers=_workers(args)
        )
    # --out may be the codebook file itself or a directory to put it in
    out = Path(args.out)
    if out.suffix == ".json":
        codebook_path = out
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        codebook_path = out / "codebook.json"
    formats.write_codebook(codebook, codebook_path)
    warnings_path = codebook_path.parent / "warnings.jsonl"
    with open(warnings_path, "w", encoding="utf-8") as fh:
        for w in warnings:
            fh.write(json.dumps(w, sort_keys=True) + "\n")
    _log("summary", command="build", objects=len(codebook.objects),
         warnings=len(warnings), out=str(codebook_path))
    return 0


def _cmd_relabel(args) -> int:
    with _Stage("load"):
        codebook = formats.read_codebook(args.codebook)
        mask_sets = formats.read_mask_dir(args.masks)
    with _Stage("relabel"):
        relabeled = relabel_masks(codebook, mask_sets)
    out = Path(args.out)
    (out / "relabeled").mkdir(parents=True, exist_ok=True)
    for view_id in sorted(relabeled):
        formats.write_relabeled(
            relabeled[view_id], out / "relabeled" / f"{view_id}.json"
        )
    if args.overlays:
        overlay_dir = out / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for view_id in sorted(relabeled):
            ms = relabeled[view_id]
            items = [
                (m.object_id, m.label or "", m.region)
                for m in ms.masks
                if m.object_id is not None
            ]
            formats.write_overlay(
                (ms.width, ms.height), items, overlay_dir / f"{view_id}.png"
            )
    _log("summary", command="relabel", views=len(relabeled), out=str(out))
    return 0


def _cmd_detect(args) -> int:
    scene, views = _load_scene_and_views(args)
    cfg = _resolve_config(args)
    with _Stage("load-codebook"):
        codebook = formats.read_codebook(args.codebook)
    boxes = []
    for cam in views:
        with _Stage(f"detect:{cam.view_id}"):
            depth = render_depth(scene, cam, cfg.near)
            boxes.extend(
                boxes_for_view(codebook, scene, cam, depth, cfg,
                               min_visible=args.min_visible)
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_boxes(boxes, out / "boxes.json")
    if args.overlays:
        overlay_dir = out / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for cam in views:
            view_boxes = [b for b in boxes if b.view_id == cam.view_id]
            formats.write_overlay(
                (cam.width, cam.height), view_boxes,
                overlay_dir / f"{cam.view_id}.png",
            )
    _log("summary", command="detect", boxes=len(boxes), out=str(out))
    return 0


def _emit_report(payload: dict, columns: list[str], out: Path | None):
    """Plain-text metric table on stdout; full JSON to a file or stdout."""
    header = "  ".join(f"{c:>10}" for c in columns)
    values = "  ".join(f"{payload[c]:>10.2f}" for c in columns)
    print(header)
    print(values)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out is not None:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")


def _cmd_eval_masks(args) -> int:
    with _Stage("load"):
        pred = formats.read_relabeled_dir(args.pred)
        gt = formats.read_relabeled_dir(args.gt)
    with _Stage("evaluate"):
        assignment = match_objects(pred, gt)
        report = mask_metrics(pred, gt, assignment, args.iou_threshold)
    payload = report.to_dict()
    payload["assignment"] = {str(p): g for p, g in sorted(assignment.items())}
    _emit_report(payload, ["miou", "precision", "recall", "f1"], args.out)
    if args.batch_csv is not None:
        sizes = [int(s) for s in args.batch_sizes.split(",") if s]
        rows = []
        for size in sizes:
            rows.extend(batch_f1(pred, gt, size, args.iou_threshold))
        with open(args.batch_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=["batch_size", "batch_index", "first_view",
                            "last_view", "f1"],
            )
            writer.writeheader()
            writer.writerows(rows)
    _log("summary", command="eval-masks", f1=round(report.f1, 4),
         miou=round(report.miou, 4), out=str(args.out) if args.out else "-")
    return 0


def _cmd_eval_detect(args) -> int:
    with _Stage("load"):
        pred = formats.read_boxes(args.pred)
        gt = formats.read_boxes(args.gt)
    with _Stage("evaluate"):
        report = detection_metrics(
            pred, gt, iou_threshold=args.iou_threshold, n_images=args.n_images
        )
    _emit_report(report.to_dict(), ["map", "mlamr"], args.out)
    _log("summary", command="eval-detect", map=round(report.map, 4),
         mlamr=round(report.mlamr, 4), out=str(args.out) if args.out else "-")
    return 0


def _cmd_ablate(args) -> int:
    scene, views = _load_scene_and_views(args)
    base_cfg = _resolve_config(args)
    with _Stage("load-masks"):
        mask_sets = formats.read_mask_dir(args.masks)
        gt = formats.read_relabeled_dir(args.gt)

    rows = []
    variants = [("full", base_cfg)]
    variants += [
        (f"no-{stage}", base_cfg.disable(stage)) for stage in sorted(STAGE_TOGGLES)
    ]
    for name, cfg in variants:
        with _Stage(f"ablate:{name}"):
            codebook, _warnings = build_codebook(
                scene, views, mask_sets, cfg, workers=_workers(args)
            )
            relabeled = relabel_masks(codebook, mask_sets)
            report = mask_metrics(relabeled, gt)
        rows.append(
            {
                "variant": name,
                "objects": len(codebook.objects),
                "f1": report.f1,
                "precision": report.precision,
                "recall": report.recall,
                "miou": report.miou,
            }
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"rows": rows}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  {'objects':>7}  {'f1':>7}  {'prec':>7}  {'rec':>7}")
    for r in rows:
        print(
            f"{r['variant']:<{width}}  {r['objects']:>7d}  {r['f1']:>7.2f}  "
            f"{r['precision']:>7.2f}  {r['recall']:>7.2f}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatbook",
        description="Object codebooks for gaussian-splat scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("render-depth", help="render median-depth rasters")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--view", type=str, default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_render_depth)

    p = sub.add_parser("build", help="build the object codebook")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=None,
                   help="association workers (default: available cores)")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("relabel", help="relabel masks with codebook object ids")
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--overlays", action="store_true")
    p.set_defaults(func=_cmd_relabel)

    p = sub.add_parser("detect", help="project codebook objects to 2D boxes")
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--min-visible", type=int, default=5)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval-masks", help="score relabeled masks against truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--batch-csv", type=Path, default=None)
    p.add_argument("--batch-sizes", type=str, default="10,20,50")
    p.set_defaults(func=_cmd_eval_masks)

    p = sub.add_parser("eval-detect", help="score detection boxes against truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--n-images", type=int, default=None)
    p.set_defaults(func=_cmd_eval_detect)

    p = sub.add_parser("ablate", help="score the pipeline with stages disabled")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=None,
                   help="association workers (default: available cores)")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        _log("error", kind=type(exc).__name__, message=str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
