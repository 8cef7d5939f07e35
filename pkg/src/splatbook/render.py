"""Software splat projection and median-depth rasterization.

Depth semantics: splats are alpha-composited front to back per pixel and the
pixel's depth is the center depth of the first splat at which the accumulated
opacity crosses 0.5.  Pixels that never cross get +inf.

Each splat contributes only inside its axis-aligned window of half-width
radius = 3 * sqrt(max eigenvalue of cov2d) around its projected center, and
only where its alpha reaches 1/255.  The window rule makes the result
independent of how pixels are grouped into tiles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CameraView, DepthImage, GaussianPrimitive, GaussianScene

DEFAULT_NEAR = 0.01
TILE = 16
ALPHA_SKIP = 1.0 / 255.0
ALPHA_CLAMP = 0.99
COV_DILATION = 0.3
_DET_FLOOR = 1e-12
_CHUNK = 1024


class UncoveredMaskError(ValueError):
    """A mask whose region holds no finite depth values."""


@dataclass(frozen=True)
class ProjectedGaussian:
    """One splat after projection into a view."""

    gaussian_index: int
    x: float            # pixel coordinates of the projected center
    y: float
    depth: float        # camera-space z of the center
    cov2d: np.ndarray   # (2, 2) image-plane covariance
    radius: float       # 3 sigma extent bound, pixels


@dataclass
class ProjectedScene:
    """Vectorized projection of every splat in front of the near plane."""

    indices: np.ndarray   # original gaussian indices, ascending
    x: np.ndarray
    y: np.ndarray
    depth: np.ndarray
    cov_a: np.ndarray     # cov2d entries: [[a, b], [b, c]]
    cov_b: np.ndarray
    cov_c: np.ndarray
    radius: np.ndarray


def _rotation_matrices(quats: np.ndarray) -> np.ndarray:
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    m = np.empty((quats.shape[0], 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[:, 0, 1] = 2.0 * (x * y - w * z)
    m[:, 0, 2] = 2.0 * (x * z + w * y)
    m[:, 1, 0] = 2.0 * (x * y + w * z)
    m[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[:, 1, 2] = 2.0 * (y * z - w * x)
    m[:, 2, 0] = 2.0 * (x * z - w * y)
    m[:, 2, 1] = 2.0 * (y * z + w * x)
    m[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def _project_arrays(centers, scales, rotations, cam: CameraView, near: float):
    """Shared projection core over plain float64 arrays.

    The pixel and depth arithmetic is written out component-wise so the
    scalar path (project_gaussian) reproduces the vectorized one bit for bit.
    """
    R = cam.rotation_matrix()
    t = np.asarray(cam.translation, dtype=np.float64)
    cx3, cy3, cz3 = centers[:, 0], centers[:, 1], centers[:, 2]
    # world-to-camera, kept as explicit component sums
    X = R[0, 0] * cx3 + R[0, 1] * cy3 + R[0, 2] * cz3 + t[0]
    Y = R[1, 0] * cx3 + R[1, 1] * cy3 + R[1, 2] * cz3 + t[1]
    Z = R[2, 0] * cx3 + R[2, 1] * cy3 + R[2, 2] * cz3 + t[2]

    keep = Z > near
    idx = np.flatnonzero(keep)
    X, Y, Z = X[idx], Y[idx], Z[idx]

    px = cam.fx * (X / Z) + cam.cx
    py = cam.fy * (Y / Z) + cam.cy

    # 3D covariance in camera frame: W (R_q S) (R_q S)^T W^T
    rot = _rotation_matrices(rotations[idx])
    ms = rot * scales[idx][:, None, :]          # R_q @ diag(scale)
    cov3 = ms @ np.swapaxes(ms, 1, 2)
    cov_cam = np.einsum("ij,njk,lk->nil", R, cov3, R, optimize=True)

    # Jacobian of the pinhole map at the camera-space center
    inv_z = 1.0 / Z
    j00 = cam.fx * inv_z
    j02 = -cam.fx * X * inv_z * inv_z
    j11 = cam.fy * inv_z
    j12 = -cam.fy * Y * inv_z * inv_z

    c00 = cov_cam[:, 0, 0]
    c01 = cov_cam[:, 0, 1]
    c02 = cov_cam[:, 0, 2]
    c11 = cov_cam[:, 1, 1]
    c12 = cov_cam[:, 1, 2]
    c22 = cov_cam[:, 2, 2]

    a = j00 * (j00 * c00 + j02 * c02) + j02 * (j00 * c02 + j02 * c22)
    b = j00 * (j11 * c01 + j12 * c02) + j02 * (j11 * c12 + j12 * c22)
    c = j11 * (j11 * c11 + j12 * c12) + j12 * (j11 * c12 + j12 * c22)

    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(mid + disc, 0.0))

    return ProjectedScene(
        indices=idx, x=px, y=py, depth=Z,
        cov_a=a, cov_b=b, cov_c=c, radius=radius,
    )


def project_scene(scene: GaussianScene, cam: CameraView,
                  near: float = DEFAULT_NEAR) -> ProjectedScene:
    """Project all scene gaussians; drops splats with center z <= near."""
    return _project_arrays(scene.centers, scene.scales, scene.rotations, cam, near)


def project_gaussian(g: GaussianPrimitive, cam: CameraView,
                     near: float = DEFAULT_NEAR) -> ProjectedGaussian | None:
    """Project a single gaussian; None when its center is at or behind near."""
    proj = _project_arrays(
        np.asarray([g.center], dtype=np.float64),
        np.asarray([g.scale], dtype=np.float64),
        np.asarray([g.rotation], dtype=np.float64),
        cam, near,
    )
    if proj.indices.size == 0:
        return None
    cov = np.array(
        [[proj.cov_a[0], proj.cov_b[0]], [proj.cov_b[0], proj.cov_c[0]]]
    )
    return ProjectedGaussian(
        gaussian_index=0,
        x=float(proj.x[0]), y=float(proj.y[0]),
        depth=float(proj.depth[0]),
        cov2d=cov, radius=float(proj.radius[0]),
    )


def _conics(proj: ProjectedScene):
    """Inverse 2D covariances; near-singular ones get the standard dilation."""
    a = proj.cov_a.copy()
    b = proj.cov_b.copy()
    c = proj.cov_c.copy()
    det = a * c - b * b
    bad = det <= _DET_FLOOR
    if np.any(bad):
        a[bad] += COV_DILATION
        c[bad] += COV_DILATION
        det = a * c - b * b
    inv_det = 1.0 / det
    return c * inv_det, -b * inv_det, a * inv_det  # conic (A, B, C)


def _composite(scene, cam, near):
    h, w = cam.height, cam.width
    depth_out = np.full((h, w), np.inf, dtype=np.float64)
    winner = np.full((h, w), -1, dtype=np.int64)
    if len(scene) == 0:
        return depth_out, winner

    proj = project_scene(scene, cam, near)
    if proj.indices.size == 0:
        return depth_out, winner

    r = proj.radius
    visible = (
        (proj.x + r >= 0.0) & (proj.x - r <= w - 1.0)
        & (proj.y + r >= 0.0) & (proj.y - r <= h - 1.0)
    )
    sel = np.flatnonzero(visible)
    if sel.size == 0:
        return depth_out, winner

    px, py = proj.x[sel], proj.y[sel]
    depth = proj.depth[sel]
    radius = proj.radius[sel]
    gidx = proj.indices[sel]
    opac = scene.opacities[gidx]
    con_a, con_b, con_c = _conics(proj)
    con_a, con_b, con_c = con_a[sel], con_b[sel], con_c[sel]

    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    tx0 = np.clip(np.floor((px - radius) / TILE).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((px + radius) / TILE).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((py - radius) / TILE).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((py + radius) / TILE).astype(np.int64), 0, tiles_y - 1)

    spans_x = tx1 - tx0 + 1
    spans_y = ty1 - ty0 + 1
    counts = spans_x * spans_y
    total = int(counts.sum())
    splat_of_pair = np.repeat(np.arange(sel.size), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    sx = spans_x[splat_of_pair]
    tile_x = tx0[splat_of_pair] + offs % sx
    tile_y = ty0[splat_of_pair] + offs // sx
    tile_id = tile_y * tiles_x + tile_x

    # front-to-back inside each tile; ties resolved by ascending gaussian index
    order = np.lexsort((gidx[splat_of_pair], depth[splat_of_pair], tile_id))
    tile_id = tile_id[order]
    splat_of_pair = splat_of_pair[order]

    tile_starts = np.flatnonzero(
        np.concatenate(([True], tile_id[1:] != tile_id[:-1]))
    )
    tile_ends = np.concatenate((tile_starts[1:], [tile_id.size]))

    for start, end in zip(tile_starts, tile_ends):
        tid = int(tile_id[start])
        ty, tx = divmod(tid, tiles_x)
        x_lo, x_hi = tx * TILE, min((tx + 1) * TILE, w)
        y_lo, y_hi = ty * TILE, min((ty + 1) * TILE, h)
        xs = np.arange(x_lo, x_hi, dtype=np.float64)
        ys = np.arange(y_lo, y_hi, dtype=np.float64)
        npx = xs.size * ys.size
        pix_x = np.tile(xs, ys.size)
        pix_y = np.repeat(ys, xs.size)

        members = splat_of_pair[start:end]
        t_carry = np.ones(npx, dtype=np.float64)
        assigned = np.zeros(npx, dtype=bool)
        tile_depth = np.full(npx, np.inf, dtype=np.float64)
        tile_winner = np.full(npx, -1, dtype=np.int64)

        for c0 in range(0, members.size, _CHUNK):
            chunk = members[c0:c0 + _CHUNK]
            dx = pix_x[None, :] - px[chunk, None]
            dy = pix_y[None, :] - py[chunk, None]
            rad = radius[chunk, None]
            inside = (np.abs(dx) <= rad) & (np.abs(dy) <= rad)
            q = (
                con_a[chunk, None] * dx * dx
                + 2.0 * con_b[chunk, None] * dx * dy
                + con_c[chunk, None] * dy * dy
            )
            alpha = opac[chunk, None] * np.exp(-0.5 * q)
            np.minimum(alpha, ALPHA_CLAMP, out=alpha)
            alpha[~inside] = 0.0
            alpha[alpha < ALPHA_SKIP] = 0.0

            trans = t_carry[None, :] * np.cumprod(1.0 - alpha, axis=0)
            crossed = (1.0 - trans) > 0.5
            any_cross = crossed.any(axis=0)
            first = np.argmax(crossed, axis=0)
            newly = any_cross & ~assigned
            if np.any(newly):
                rows = first[newly]
                chunk_idx = chunk[rows]
                tile_depth[newly] = depth[chunk_idx]
                tile_winner[newly] = gidx[chunk_idx]
                assigned |= newly
            t_carry = trans[-1, :]
            if assigned.all():
                break

        block_d = tile_depth.reshape(ys.size, xs.size)
        block_w = tile_winner.reshape(ys.size, xs.size)
        depth_out[y_lo:y_hi, x_lo:x_hi] = block_d
        winner[y_lo:y_hi, x_lo:x_hi] = block_w

    return depth_out, winner


def render_depth(scene: GaussianScene, cam: CameraView,
                 near: float = DEFAULT_NEAR) -> DepthImage:
    """Median-depth raster for one view."""
    depth, _ = _composite(scene, cam, near)
    return DepthImage(values=depth)


def render_depth_with_ids(scene: GaussianScene, cam: CameraView,
                          near: float = DEFAULT_NEAR):
    """Depth raster plus, per pixel, the index of the splat that set it."""
    depth, winner = _composite(scene, cam, near)
    return DepthImage(values=depth), winner


def mask_mean_depth(depth: DepthImage, region: np.ndarray) -> float:
    """Mean of the finite depth values inside a mask region."""
    region = np.asarray(region, dtype=bool)
    sel = region & np.isfinite(depth.values)
    if not sel.any():
        raise UncoveredMaskError("mask region holds no finite depth values")
    return float(depth.values[sel].mean())


def unproject_pixel(cam: CameraView, x: float, y: float, depth: float) -> np.ndarray:
    """Camera-space point for a pixel coordinate at a given depth."""
    return np.array(
        [(x - cam.cx) / cam.fx * depth, (y - cam.cy) / cam.fy * depth, depth]
    )
