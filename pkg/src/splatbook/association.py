"""Mask-to-gaussian association via adaptive depth tolerance.

A gaussian belongs to a mask when its center projects into the mask region
and its center depth d satisfies D - delta <= d <= D + delta at the landing
pixel, where D is the rendered depth and delta a per-pixel tolerance derived
from depth variation inside the mask.
"""
from __future__ import annotations

import numpy as np

from .model import (
    CameraView,
    DepthImage,
    GaussianScene,
    MaskAssociation,
    MaskInstance,
    PipelineConfig,
    ToleranceMap,
)
from .render import ProjectedScene, mask_mean_depth, project_scene


def tolerance_map(depth: DepthImage, region: np.ndarray, depth_bound: float,
                  half_width: int = 3, exclude_axes: bool = True) -> ToleranceMap:
    """Per-pixel adaptive tolerance over a mask region.

    For each masked pixel with finite depth, delta is the largest absolute
    depth difference to a neighboring masked pixel inside the
    (2*half_width+1)^2 window, taken over differences not exceeding
    depth_bound; pixels with no qualifying neighbor get delta 0.

    With exclude_axes (the default) a neighbor must differ from the center
    in both coordinates, so whole rows and columns through the center are
    skipped.  Passing exclude_axes=False skips only the center pixel itself,
    which admits same-row and same-column neighbors.
    """
    region = np.asarray(region, dtype=bool)
    vals = depth.values
    if region.shape != vals.shape:
        raise ValueError("mask region shape does not match the depth raster")
    valid = region & np.isfinite(vals)
    h, w = vals.shape
    delta = np.zeros((h, w), dtype=np.float64)

    for dy in range(-half_width, half_width + 1):
        for dx in range(-half_width, half_width + 1):
            if exclude_axes:
                if dx == 0 or dy == 0:
                    continue
            elif dx == 0 and dy == 0:
                continue
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            center = (slice(ys0, ys1), slice(xs0, xs1))
            neighbor = (slice(ys0 + dy, ys1 + dy), slice(xs0 + dx, xs1 + dx))
            both = valid[center] & valid[neighbor]
            with np.errstate(invalid="ignore"):
                # inf-inf at uncovered pixels yields nan; `both` masks it out
                diff = np.abs(vals[center] - vals[neighbor])
                qualifies = both & (diff <= depth_bound)
            np.maximum(
                delta[center],
                np.where(qualifies, diff, 0.0),
                out=delta[center],
            )

    delta[~valid] = 0.0  # sentinel-depth pixels carry no tolerance
    return ToleranceMap(values=delta)


def landing_pixels(proj: ProjectedScene, width: int, height: int):
    """Integer pixel of each projected center: round, then clamp into bounds."""
    px = np.clip(np.floor(proj.x + 0.5).astype(np.int64), 0, width - 1)
    py = np.clip(np.floor(proj.y + 0.5).astype(np.int64), 0, height - 1)
    return px, py


def gaussians_for_mask(scene: GaussianScene, cam: CameraView, mask: MaskInstance,
                       depth: DepthImage, tol: ToleranceMap, cfg: PipelineConfig,
                       projection: ProjectedScene | None = None) -> MaskAssociation:
    """Collect the gaussians supporting one mask.

    Raises UncoveredMaskError (via mask_mean_depth) when the mask holds no
    finite depth; callers skip such masks.  When cfg.enable_depth_test is
    false, membership is decided by projection into the region alone.

    The association weight is the mask confidence divided by the mask's mean
    depth, and labels are case-folded here so every later comparison is
    exact.
    """
    mean_depth = mask_mean_depth(depth, mask.region)
    proj = projection if projection is not None else project_scene(scene, cam, cfg.near)

    px, py = landing_pixels(proj, cam.width, cam.height)
    inside = mask.region[py, px]
    if cfg.enable_depth_test:
        d_img = depth.values[py, px]
        d_tol = tol.values[py, px]
        inside = (
            inside
            & (d_img - d_tol <= proj.depth)
            & (proj.depth <= d_img + d_tol)
        )
    indices = {int(i) for i in proj.indices[inside]}

    return MaskAssociation(
        view_id=cam.view_id,
        mask_id=mask.mask_id,
        gaussian_indices=indices,
        weight=mask.confidence / mean_depth,
        label=mask.label.casefold(),
        confidence=mask.confidence,
    )
