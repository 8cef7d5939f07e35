"""Evaluation: cross-view object matching, mask metrics, boxes, detection metrics.

Mask metrics follow the instance-matching protocol: predicted and ground
truth object ids are put in optimal one-to-one correspondence by total pixel
intersection over all views, then each (view, instance) pair scores TP at
IoU >= 0.5, with unmatched ground truth instances as FN and uncredited
predicted instances as FP.  Detection metrics are class-wise average
precision (all-point interpolation) and log-average miss rate over nine
FPPI reference points in [0.01, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import (
    BBox,
    CameraView,
    CodebookObject,
    DepthImage,
    GaussianScene,
    ObjectCodebook,
    PipelineConfig,
    RelabeledMaskSet,
)
from .render import project_scene


@dataclass
class AssociationReport:
    miou: float
    precision: float
    recall: float
    f1: float
    true_positives: int
    false_positives: int
    false_negatives: int
    unique_pred_masks: int
    unique_gt_masks: int
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "unique_pred_masks": self.unique_pred_masks,
            "unique_gt_masks": self.unique_gt_masks,
            "degenerate": list(self.degenerate),
        }


@dataclass
class DetectionReport:
    map: float
    mlamr: float
    per_class: dict[str, dict] = field(default_factory=dict)
    skipped_classes: tuple[str, ...] = ()
    n_images: int = 0

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "mlamr": self.mlamr,
            "per_class": self.per_class,
            "skipped_classes": list(self.skipped_classes),
            "n_images": self.n_images,
        }


def instance_regions(mask_sets: dict[str, RelabeledMaskSet]):
    """Per view, the union region of every assigned object id."""
    out: dict[str, dict[int, np.ndarray]] = {}
    for view_id in sorted(mask_sets):
        ms = mask_sets[view_id]
        regions: dict[int, np.ndarray] = {}
        for m in ms.masks:
            if m.object_id is None or not m.region.any():
                continue
            if m.object_id in regions:
                regions[m.object_id] = regions[m.object_id] | m.region
            else:
                regions[m.object_id] = m.region.copy()
        out[view_id] = regions
    return out


def match_objects(pred_sets: dict[str, RelabeledMaskSet],
                  gt_sets: dict[str, RelabeledMaskSet]) -> dict[int, int]:
    """Optimal one-to-one pred-to-gt id assignment.

    Maximizes the total pixel intersection summed over all shared views;
    pairs that share no pixels are left unmatched.
    """
    pred_regions = instance_regions(pred_sets)
    gt_regions = instance_regions(gt_sets)

    pred_ids = sorted({i for regs in pred_regions.values() for i in regs})
    gt_ids = sorted({i for regs in gt_regions.values() for i in regs})
    if not pred_ids or not gt_ids:
        return {}

    inter = np.zeros((len(pred_ids), len(gt_ids)), dtype=np.float64)
    p_pos = {p: i for i, p in enumerate(pred_ids)}
    g_pos = {g: i for i, g in enumerate(gt_ids)}
    for view_id, p_regs in pred_regions.items():
        g_regs = gt_regions.get(view_id, {})
        for p, p_region in p_regs.items():
            for g, g_region in g_regs.items():
                inter[p_pos[p], g_pos[g]] += float(
                    np.count_nonzero(p_region & g_region)
                )

    rows, cols = linear_sum_assignment(inter, maximize=True)
    return {
        pred_ids[r]: gt_ids[c]
        for r, c in zip(rows, cols)
        if inter[r, c] > 0.0
    }


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    if inter == 0:
        return 0.0
    union = np.count_nonzero(a | b)
    return inter / union


def mask_metrics(pred_sets: dict[str, RelabeledMaskSet],
                 gt_sets: dict[str, RelabeledMaskSet],
                 assignment: dict[int, int] | None = None,
                 iou_threshold: float = 0.5) -> AssociationReport:
    """Score relabeled masks against consistently-labeled ground truth."""
    if assignment is None:
        assignment = match_objects(pred_sets, gt_sets)
    pred_regions = instance_regions(pred_sets)
    gt_regions = instance_regions(gt_sets)
    gt_of_pred = dict(assignment)
    pred_of_gt = {g: p for p, g in assignment.items()}

    tp = fp = fn = 0
    ious = []
    views = sorted(set(pred_regions) | set(gt_regions))
    for view_id in views:
        p_regs = pred_regions.get(view_id, {})
        g_regs = gt_regions.get(view_id, {})
        credited = set()
        for g in sorted(g_regs):
            p = pred_of_gt.get(g)
            if p is not None and p in p_regs:
                iou = _iou(p_regs[p], g_regs[g])
                if iou >= iou_threshold:
                    tp += 1
                    ious.append(iou)
                    credited.add(p)
                    continue
            fn += 1
        fp += sum(1 for p in p_regs if p not in credited)

    degenerate = []
    if tp + fp > 0:
        precision = 100.0 * tp / (tp + fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if tp + fn > 0:
        recall = 100.0 * tp / (tp + fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.append("f1")
    if ious:
        miou = 100.0 * float(np.mean(ious))
    else:
        miou = 0.0
        degenerate.append("miou")

    return AssociationReport(
        miou=miou, precision=precision, recall=recall, f1=f1,
        true_positives=tp, false_positives=fp, false_negatives=fn,
        unique_pred_masks=len({i for r in pred_regions.values() for i in r}),
        unique_gt_masks=len({i for r in gt_regions.values() for i in r}),
        degenerate=tuple(degenerate),
    )


def batch_f1(pred_sets: dict[str, RelabeledMaskSet],
             gt_sets: dict[str, RelabeledMaskSet],
             batch_size: int, iou_threshold: float = 0.5):
    """F1 per consecutive view batch; each batch is matched independently."""
    views = sorted(set(pred_sets) & set(gt_sets))
    rows = []
    for start in range(0, len(views), batch_size):
        chunk = views[start:start + batch_size]
        pred_chunk = {v: pred_sets[v] for v in chunk}
        gt_chunk = {v: gt_sets[v] for v in chunk}
        report = mask_metrics(pred_chunk, gt_chunk, iou_threshold=iou_threshold)
        rows.append(
            {
                "batch_size": batch_size,
                "batch_index": start // batch_size,
                "first_view": chunk[0],
                "last_view": chunk[-1],
                "f1": report.f1,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# detection

def bbox_from_object(obj: CodebookObject, scene: GaussianScene, cam: CameraView,
                     depth: DepthImage, cfg: PipelineConfig,
                     min_visible: int = 5) -> BBox | None:
    """Project an object's gaussians into a view and enclose the visible ones.

    A gaussian counts as visible when its center lands inside the image and
    its depth does not exceed the rendered depth at that pixel by more than
    the depth bound (occlusion slack).  Fewer than min_visible survivors
    yield no box.  The box encloses each survivor's center plus a two-sigma
    projected extent, clipped to the image.
    """
    indices = np.asarray(sorted(obj.gaussian_indices), dtype=np.int64)
    if indices.size == 0:
        return None
    sub_centers = scene.centers[indices]
    sub_scales = scene.scales[indices]
    sub_rots = scene.rotations[indices]
    from .render import _project_arrays

    proj = _project_arrays(sub_centers, sub_scales, sub_rots, cam, cfg.near)
    if proj.indices.size == 0:
        return None

    px = np.floor(proj.x + 0.5).astype(np.int64)
    py = np.floor(proj.y + 0.5).astype(np.int64)
    in_img = (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
    if not in_img.any():
        return None
    px, py = px[in_img], py[in_img]
    d_img = depth.values[py, px]
    visible = proj.depth[in_img] <= d_img + cfg.depth_bound
    if int(visible.sum()) < min_visible:
        return None

    keep = np.flatnonzero(in_img)[visible]
    sx = 2.0 * np.sqrt(np.maximum(proj.cov_a[keep], 0.0))
    sy = 2.0 * np.sqrt(np.maximum(proj.cov_c[keep], 0.0))
    x_min = float(np.min(proj.x[keep] - sx))
    x_max = float(np.max(proj.x[keep] + sx))
    y_min = float(np.min(proj.y[keep] - sy))
    y_max = float(np.max(proj.y[keep] + sy))

    confidence = 1.0 if obj.object_confidence is None else float(obj.object_confidence)
    return BBox(
        view_id=cam.view_id,
        label=obj.final_label if obj.final_label is not None else "",
        confidence=confidence,
        x_min=max(0.0, x_min),
        y_min=max(0.0, y_min),
        x_max=min(float(cam.width), x_max),
        y_max=min(float(cam.height), y_max),
        object_id=obj.object_id,
    )


def boxes_for_view(codebook: ObjectCodebook, scene: GaussianScene,
                   cam: CameraView, depth: DepthImage, cfg: PipelineConfig,
                   min_visible: int = 5) -> list[BBox]:
    out = []
    for obj in sorted(codebook.objects, key=lambda o: o.object_id):
        box = bbox_from_object(obj, scene, cam, depth, cfg, min_visible)
        if box is not None:
            out.append(box)
    return out


def box_iou(a: BBox, b: BBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _rank_key(box: BBox):
    oid = box.object_id if box.object_id is not None else -1
    return (-box.confidence, oid, box.view_id, box.x_min, box.y_min)


def _match_class(preds: list[BBox], gts: list[BBox], iou_threshold: float):
    """Greedy confidence-descending matching; returns per-pred TP flags."""
    preds = sorted(preds, key=_rank_key)
    taken: set[int] = set()
    gt_by_view: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        gt_by_view.setdefault(g.view_id, []).append(i)
    flags = np.zeros(len(preds), dtype=bool)
    for k, p in enumerate(preds):
        best, best_iou = -1, iou_threshold
        for gi in gt_by_view.get(p.view_id, ()):
            if gi in taken:
                continue
            iou = box_iou(p, gts[gi])
            if iou >= best_iou and (best == -1 or iou > best_iou):
                best, best_iou = gi, iou
        if best >= 0:
            taken.add(best)
            flags[k] = True
    return preds, flags


def _average_precision(flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ranked TP flags."""
    if n_gt == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


_FPPI_REFS = np.power(10.0, np.linspace(-2.0, 0.0, 9))


def _log_average_miss_rate(flags: np.ndarray, n_gt: int, n_images: int) -> float:
    """Caltech-style LAMR: geometric mean of miss rate at nine FPPI points."""
    if n_gt == 0 or n_images == 0:
        return 1.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    miss = 1.0 - tp_cum / n_gt
    fppi = fp_cum / n_images
    samples = []
    for ref in _FPPI_REFS:
        ok = np.flatnonzero(fppi <= ref)
        value = float(miss[ok].min()) if ok.size else 1.0
        samples.append(max(value, 1e-10))
    return float(np.exp(np.mean(np.log(samples))))


def detection_metrics(pred_boxes: list[BBox], gt_boxes: list[BBox],
                      iou_threshold: float = 0.5,
                      n_images: int | None = None) -> DetectionReport:
    """Class-averaged AP and log-average miss rate, both in percent.

    Classes with no ground truth boxes are excluded from the means and
    reported in skipped_classes.
    """
    if n_images is None:
        n_images = len(
            {b.view_id for b in pred_boxes} | {b.view_id for b in gt_boxes}
        )
    gt_classes = sorted({b.label for b in gt_boxes})
    pred_only = sorted({b.label for b in pred_boxes} - set(gt_classes))

    per_class = {}
    aps, lamrs = [], []
    for cls in gt_classes:
        preds = [b for b in pred_boxes if b.label == cls]
        gts = [b for b in gt_boxes if b.label == cls]
        _ranked, flags = _match_class(preds, gts, iou_threshold)
        ap = _average_precision(flags, len(gts))
        lamr = _log_average_miss_rate(flags, len(gts), n_images)
        per_class[cls] = {
            "ap": 100.0 * ap,
            "lamr": 100.0 * lamr,
            "n_gt": len(gts),
            "n_pred": len(preds),
        }
        aps.append(ap)
        lamrs.append(lamr)

    return DetectionReport(
        map=100.0 * float(np.mean(aps)) if aps else 0.0,
        mlamr=100.0 * float(np.mean(lamrs)) if lamrs else 100.0,
        per_class=per_class,
        skipped_classes=tuple(pred_only),
        n_images=n_images,
    )
