"""Object codebook construction from per-mask gaussian evidence.

Masks are folded into the codebook one at a time (views in ascending
view_id, masks in ascending mask_id) so results are reproducible.  After all
views are consumed the codebook goes through low-weight filtering, spatial
merging, a second filtering pass, and label voting.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .association import gaussians_for_mask, tolerance_map
from .model import (
    CameraView,
    CodebookObject,
    GaussianScene,
    MaskAssociation,
    ObjectCodebook,
    PipelineConfig,
    RelabeledMask,
    RelabeledMaskSet,
    ToleranceMap,
    ViewMaskSet,
)
from .render import UncoveredMaskError, project_scene, render_depth


class UnionFind:
    """Union-find over object ids with path compression."""

    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:  # compress
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller id as the representative
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _overlap_ratio(a: set, b: set) -> float:
    """Intersection size normalized by the smaller set."""
    if not a or not b:
        return 0.0
    inter = len(a & b)
    return inter / min(len(a), len(b))


def semantic_merge_step(codebook: ObjectCodebook, assoc: MaskAssociation,
                        cfg: PipelineConfig) -> CodebookObject:
    """Fold one mask association into the codebook.

    Candidate objects are those whose current best-vote label equals the
    association's label (all objects when the semantic constraint is off).
    The association merges into the best-overlapping candidate when that
    overlap strictly exceeds tau_overlap, else it founds a new object.
    Returns the object that received the mask.
    """
    if not assoc.gaussian_indices:
        raise ValueError("association carries an empty gaussian set")

    if cfg.enable_semantic_constraint:
        candidates = [
            o for o in codebook.objects if o.best_vote() == assoc.label
        ]
    else:
        candidates = list(codebook.objects)

    best = None
    best_overlap = 0.0
    for obj in candidates:  # objects iterate in creation order: ascending id
        ratio = _overlap_ratio(assoc.gaussian_indices, obj.gaussian_indices)
        if ratio > best_overlap:
            best, best_overlap = obj, ratio

    if best is not None and best_overlap > cfg.tau_overlap:
        target = best
    else:
        target = codebook.new_object()

    target.gaussian_indices |= assoc.gaussian_indices
    for idx in sorted(assoc.gaussian_indices):
        target.gaussian_weights[idx] = (
            target.gaussian_weights.get(idx, 0.0) + assoc.weight
        )
    target.label_votes[assoc.label] = (
        target.label_votes.get(assoc.label, 0.0) + assoc.confidence
    )
    target.mask_refs.append((assoc.view_id, assoc.mask_id, assoc.confidence))
    return target


def filter_low_weight(obj: CodebookObject, tau: float) -> CodebookObject:
    """Drop gaussians whose weight falls strictly below tau * max weight.

    The maximum-weight gaussian always survives, so the object never empties.
    """
    if not obj.gaussian_indices:
        return obj
    w_max = max(obj.gaussian_weights.values())
    cut = w_max * tau
    keep = {i for i, w in obj.gaussian_weights.items() if w >= cut}
    obj.gaussian_indices = keep
    obj.gaussian_weights = {i: obj.gaussian_weights[i] for i in sorted(keep)}
    return obj


def spatial_merge(codebook: ObjectCodebook, cfg: PipelineConfig) -> ObjectCodebook:
    """Single-pass transitive merge of spatially entangled objects.

    Two objects are linked when the shared gaussian count exceeds
    tau_spatial of each object's size (both directions, strictly).  Linked
    components collapse into one object keeping the smallest id; weights add
    index-wise, votes add per label, mask references concatenate in id order.
    """
    objs = sorted(codebook.objects, key=lambda o: o.object_id)
    uf = UnionFind([o.object_id for o in objs])
    for i, a in enumerate(objs):
        for b in objs[i + 1:]:
            if not a.gaussian_indices or not b.gaussian_indices:
                continue
            inter = len(a.gaussian_indices & b.gaussian_indices)
            if inter == 0:
                continue
            if (
                inter / len(a.gaussian_indices) > cfg.tau_spatial
                and inter / len(b.gaussian_indices) > cfg.tau_spatial
            ):
                uf.union(a.object_id, b.object_id)

    groups: dict[int, list[CodebookObject]] = {}
    for o in objs:
        groups.setdefault(uf.find(o.object_id), []).append(o)

    merged: list[CodebookObject] = []
    for root in sorted(groups):
        members = sorted(groups[root], key=lambda o: o.object_id)
        if len(members) == 1:
            merged.append(members[0])
            continue
        out = CodebookObject(object_id=members[0].object_id)
        for m in members:
            out.gaussian_indices |= m.gaussian_indices
            for idx in sorted(m.gaussian_weights):
                out.gaussian_weights[idx] = (
                    out.gaussian_weights.get(idx, 0.0) + m.gaussian_weights[idx]
                )
            for label in m.label_votes:
                out.label_votes[label] = (
                    out.label_votes.get(label, 0.0) + m.label_votes[label]
                )
            out.mask_refs.extend(m.mask_refs)
        merged.append(out)

    codebook.objects = merged
    return codebook


def vote_label(obj: CodebookObject) -> CodebookObject:
    """Fix the object's final label by highest summed confidence."""
    obj.final_label = obj.best_vote()
    return obj


def distinct_mask_labels(mask_sets: dict[str, ViewMaskSet]) -> set[str]:
    """Case-folded label vocabulary present in the input masks."""
    labels: set[str] = set()
    for ms in mask_sets.values():
        for m in ms.masks:
            labels.add(m.label.casefold())
    return labels


def resolve_postprocess(cfg: PipelineConfig, mask_sets) -> bool:
    """Post-processing runs when forced on, or in auto mode once the
    detected label vocabulary exceeds ten."""
    if cfg.postprocess_mode == "on":
        return True
    if cfg.postprocess_mode == "off":
        return False
    return len(distinct_mask_labels(mask_sets)) > 10


def _associate_view(scene, cam, mask_set, cfg, warnings_out):
    """Render one view and associate each of its masks."""
    depth = render_depth(scene, cam, cfg.near)
    proj = project_scene(scene, cam, cfg.near)
    zero_tol = ToleranceMap(values=np.zeros_like(depth.values))
    out = []
    for mask in mask_set.masks:
        if cfg.enable_depth_test:
            tol = tolerance_map(depth, mask.region, cfg.depth_bound, cfg.half_width)
        else:
            tol = zero_tol  # unused by the projection-only membership test
        try:
            assoc = gaussians_for_mask(
                scene, cam, mask, depth, tol, cfg, projection=proj
            )
        except UncoveredMaskError:
            warnings_out.append(
                {
                    "view_id": cam.view_id,
                    "mask_id": mask.mask_id,
                    "reason": "mask holds no finite depth; association skipped",
                }
            )
            continue
        out.append(assoc)
    return out


def build_codebook(scene: GaussianScene, views: list[CameraView],
                   mask_sets: dict[str, ViewMaskSet], cfg: PipelineConfig,
                   workers: int = 1):
    """Run the full codebook pipeline over a scene.

    Returns (codebook, warnings).  Per-view association may run on several
    workers; the merge consumes results in ascending (view_id, mask_id)
    order regardless, so output is identical for any worker count.
    """
    cfg.validate()
    if len(scene) == 0:
        raise ValueError("cannot build a codebook from an empty scene")
    view_ids = {v.view_id for v in views}
    missing = sorted(set(mask_sets) - view_ids)
    if missing:
        raise ValueError(f"mask sets reference unknown views: {missing}")

    ordered = sorted(
        (v for v in views if v.view_id in mask_sets), key=lambda v: v.view_id
    )
    warnings: list[dict] = []
    per_view: dict[str, list[MaskAssociation]] = {}

    if workers > 1 and len(ordered) > 1:
        view_warnings = {v.view_id: [] for v in ordered}
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                v.view_id: pool.submit(
                    _associate_view, scene, v, mask_sets[v.view_id], cfg,
                    view_warnings[v.view_id],
                )
                for v in ordered
            }
            for v in ordered:
                per_view[v.view_id] = futures[v.view_id].result()
        for v in ordered:
            warnings.extend(view_warnings[v.view_id])
    else:
        for v in ordered:
            per_view[v.view_id] = _associate_view(
                scene, v, mask_sets[v.view_id], cfg, warnings
            )

    codebook = ObjectCodebook()
    for v in ordered:
        for assoc in per_view[v.view_id]:
            if not assoc.gaussian_indices:
                warnings.append(
                    {
                        "view_id": assoc.view_id,
                        "mask_id": assoc.mask_id,
                        "reason": "no gaussians passed the association test",
                    }
                )
                continue
            semantic_merge_step(codebook, assoc, cfg)

    if cfg.enable_filter1:
        for obj in codebook.objects:
            filter_low_weight(obj, cfg.tau_filter1)
    if cfg.enable_spatial_merge:
        spatial_merge(codebook, cfg)
    if cfg.enable_filter2:
        for obj in codebook.objects:
            filter_low_weight(obj, cfg.tau_filter2)

    empty = [o for o in codebook.objects if not o.gaussian_indices]
    if empty:  # defensive; filtering always retains the argmax gaussian
        for o in empty:
            warnings.append(
                {
                    "view_id": None,
                    "mask_id": None,
                    "reason": f"object {o.object_id} lost all gaussians; dropped",
                }
            )
        codebook.objects = [o for o in codebook.objects if o.gaussian_indices]

    for obj in codebook.objects:
        vote_label(obj)

    if resolve_postprocess(cfg, mask_sets):
        from .postprocess import filter_objects, object_confidence, remove_spatial_outliers

        for obj in codebook.objects:
            obj.object_confidence = object_confidence(obj)
        if cfg.enable_object_filter:
            dropped = filter_objects(codebook, cfg)
            for o in dropped:
                warnings.append(
                    {
                        "view_id": None,
                        "mask_id": None,
                        "reason": (
                            f"object {o.object_id} "
                            f"(confidence {o.object_confidence:.4f}) filtered out"
                        ),
                    }
                )
        if cfg.enable_outlier_removal:
            codebook.objects = [
                remove_spatial_outliers(obj, scene, cfg)
                for obj in codebook.objects
            ]

    codebook.check()
    return codebook, warnings


def relabel_masks(codebook: ObjectCodebook,
                  mask_sets: dict[str, ViewMaskSet]) -> dict[str, RelabeledMaskSet]:
    """Reassign every mask the id and final label of its codebook object.

    Masks that no surviving object references come back with a null id.
    """
    lookup = codebook.mask_lookup()
    out: dict[str, RelabeledMaskSet] = {}
    for view_id in sorted(mask_sets):
        ms = mask_sets[view_id]
        relabeled = []
        for mask in ms.masks:
            obj = lookup.get((view_id, mask.mask_id))
            if obj is None:
                relabeled.append(
                    RelabeledMask(
                        mask_id=mask.mask_id, object_id=None,
                        label=None, region=mask.region,
                    )
                )
            else:
                relabeled.append(
                    RelabeledMask(
                        mask_id=mask.mask_id,
                        object_id=obj.object_id,
                        label=obj.final_label,
                        region=mask.region,
                    )
                )
        out[view_id] = RelabeledMaskSet(
            view_id=view_id, width=ms.width, height=ms.height, masks=relabeled
        )
    return out
