"""Codebook post-processing: confidence filtering and spatial outlier removal.

These stages run when the scene's detected label vocabulary is large (more
than ten distinct labels) or when forced on; small curated scenes skip them.
"""
from __future__ import annotations

import math

import numpy as np

from .clustering import ClusteringParams, hdbscan_eps, kdist_curve, kneedle_elbow
from .model import CodebookObject, GaussianScene, ObjectCodebook, PipelineConfig


def object_confidence(obj: CodebookObject) -> float:
    """ln(#masks) times the mean mask confidence.

    Single-observation objects score exactly zero, which makes them prime
    candidates for removal.
    """
    m = len(obj.mask_refs)
    if m == 0:
        return 0.0
    mean_conf = sum(conf for _v, _m, conf in obj.mask_refs) / m
    return math.log(m) * mean_conf


def filter_objects(codebook: ObjectCodebook, cfg: PipelineConfig) -> list[CodebookObject]:
    """Drop objects whose confidence falls strictly below tau_object.

    Sets object_confidence on every object first; returns the dropped ones.
    """
    for obj in codebook.objects:
        obj.object_confidence = object_confidence(obj)
    dropped = [
        o for o in codebook.objects if o.object_confidence < cfg.tau_object
    ]
    codebook.objects = [
        o for o in codebook.objects if o.object_confidence >= cfg.tau_object
    ]
    return dropped


def estimate_eps(points: np.ndarray, min_pts: int) -> float:
    """Distance threshold from the k-distance curve elbow.

    Falls back to the curve's 90th percentile when no knee is detected.
    """
    curve = kdist_curve(points, min_pts - 1)
    eps = kneedle_elbow(curve)
    if eps is None or eps <= 0.0:
        eps = float(np.percentile(curve, 90))
    return eps


def remove_spatial_outliers(obj: CodebookObject, scene: GaussianScene,
                            cfg: PipelineConfig) -> CodebookObject:
    """Strip spatial stragglers from one object's gaussian set.

    Clusters the gaussian centers and removes points flagged as outliers or
    whose membership probability falls below the cutoff.  Objects with too
    few gaussians to cluster come back unchanged, and the object is never
    emptied: if everything would be removed, it is returned as-is.
    """
    indices = sorted(obj.gaussian_indices)
    if len(indices) <= cfg.min_pts:
        return obj

    points = scene.centers[np.asarray(indices, dtype=np.int64)]
    eps = estimate_eps(points, cfg.min_pts)
    if eps <= 0.0:
        return obj  # degenerate geometry (all points coincide)

    params = ClusteringParams(min_pts=cfg.min_pts, eps_hat=eps)
    labels, probs = hdbscan_eps(points, params)
    keep_mask = (labels >= 0) & (probs >= params.membership_cutoff)
    if not keep_mask.any():
        return obj

    keep = {indices[i] for i in np.flatnonzero(keep_mask)}
    obj.gaussian_indices = keep
    obj.gaussian_weights = {
        i: obj.gaussian_weights[i] for i in sorted(keep)
    }
    return obj
