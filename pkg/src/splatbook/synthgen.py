"""Synthetic scene and mask generator with controllable corruption.

Produces a gaussian scene of labeled primitive shapes plus unlabeled
floaters, a camera rig, per-view instance masks as an imperfect detector
would emit them (label flips, dropped masks, eroded regions, spurious
blobs, jittered confidences), and the noise-free ground truth needed for
evaluation.  All randomness is counter-based: every draw comes from a
Philox generator keyed by (seed, stream, entity), so any part of the
output can be regenerated in isolation and the whole dataset is identical
across runs and platforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .model import (
    CameraView,
    GaussianScene,
    MaskInstance,
    RelabeledMask,
    RelabeledMaskSet,
    BBox,
    ViewMaskSet,
)
from .render import DEFAULT_NEAR, render_depth_with_ids

LABEL_VOCAB = (
    "chair", "table", "lamp", "sofa", "monitor", "plant",
    "cabinet", "mug", "keyboard", "book", "door", "window",
)

# RNG stream ids; entity is the object/view index within the stream
_STREAM_OBJECTS = 0
_STREAM_FLOATERS = 1
_STREAM_NOISE = 2

FLOATER_ID = -1      # ground truth id for floater gaussians
BACKGROUND_ID = -2   # ground truth id for pixels no object owns


def _rng(seed: int, stream: int, entity: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, stream, entity]))
    )


@dataclass(frozen=True)
class SynthObject:
    """A labeled blob of gaussians: an axis-aligned box or a ball."""

    label: str
    shape: str                       # "box" | "sphere"
    center: tuple[float, float, float]
    extent: float                    # edge length / diameter, world units
    count: int
    opacity: float = 0.9

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.extent <= 0.0:
            raise ValueError("extent must be positive")
        if self.count <= 0:
            raise ValueError("count must be positive")
        if not (0.0 < self.opacity < 1.0):
            raise ValueError("opacity must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class FloaterSpec:
    """Unlabeled junk gaussians scattered uniformly in a box."""

    count: int = 0
    low: tuple[float, float, float] = (-5.0, -5.0, -5.0)
    high: tuple[float, float, float] = (5.0, 5.0, 5.0)
    opacity: float = 0.9

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("floater count must be non-negative")


@dataclass(frozen=True)
class CameraRig:
    """orbit: ring of cameras around look_at; corridor: a straight pass."""

    kind: str = "orbit"              # "orbit" | "corridor"
    count: int = 12
    radius: float = 6.0              # orbit radius / corridor lateral offset
    length: float = 8.0              # corridor only
    height: float = 3.0              # camera height above look_at
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    image_size: int = 128
    focal: float = 120.0

    def __post_init__(self):
        if self.kind not in ("orbit", "corridor"):
            raise ValueError(f"unknown rig kind {self.kind!r}")
        if self.count <= 0:
            raise ValueError("camera count must be positive")
        if self.image_size <= 0 or self.focal <= 0.0:
            raise ValueError("image_size and focal must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    """Detector imperfections applied to the emitted masks."""

    label_flip_rate: float = 0.0
    drop_rate: float = 0.0
    mask_erosion_px: int = 0
    spurious_rate: float = 0.0
    conf_low: float = 1.0
    conf_high: float = 1.0

    def __post_init__(self):
        for name in ("label_flip_rate", "drop_rate", "spurious_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mask_erosion_px < 0:
            raise ValueError("mask_erosion_px must be non-negative")
        if not (0.0 <= self.conf_low <= self.conf_high <= 1.0):
            raise ValueError("need 0 <= conf_low <= conf_high <= 1")


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    objects: tuple[SynthObject, ...]
    floaters: FloaterSpec = field(default_factory=FloaterSpec)
    rig: CameraRig = field(default_factory=CameraRig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    min_pixels: int = 20             # visibility threshold per view

    def __post_init__(self):
        if not self.objects:
            raise ValueError("spec needs at least one object")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "min_pixels": self.min_pixels,
            "objects": [
                {
                    "label": o.label, "shape": o.shape,
                    "center": list(o.center), "extent": o.extent,
                    "count": o.count, "opacity": o.opacity,
                }
                for o in self.objects
            ],
            "floaters": {
                "count": self.floaters.count,
                "low": list(self.floaters.low),
                "high": list(self.floaters.high),
                "opacity": self.floaters.opacity,
            },
            "rig": {
                "kind": self.rig.kind, "count": self.rig.count,
                "radius": self.rig.radius, "length": self.rig.length,
                "height": self.rig.height, "look_at": list(self.rig.look_at),
                "image_size": self.rig.image_size, "focal": self.rig.focal,
            },
            "noise": {
                "label_flip_rate": self.noise.label_flip_rate,
                "drop_rate": self.noise.drop_rate,
                "mask_erosion_px": self.noise.mask_erosion_px,
                "spurious_rate": self.noise.spurious_rate,
                "conf_low": self.noise.conf_low,
                "conf_high": self.noise.conf_high,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        try:
            objects = tuple(
                SynthObject(
                    label=o["label"], shape=o["shape"],
                    center=tuple(o["center"]), extent=float(o["extent"]),
                    count=int(o["count"]),
                    opacity=float(o.get("opacity", 0.9)),
                )
                for o in data["objects"]
            )
            fl = data.get("floaters", {})
            floaters = FloaterSpec(
                count=int(fl.get("count", 0)),
                low=tuple(fl.get("low", (-5.0, -5.0, -5.0))),
                high=tuple(fl.get("high", (5.0, 5.0, 5.0))),
                opacity=float(fl.get("opacity", 0.9)),
            )
            rg = data.get("rig", {})
            rig = CameraRig(
                kind=rg.get("kind", "orbit"),
                count=int(rg.get("count", 12)),
                radius=float(rg.get("radius", 6.0)),
                length=float(rg.get("length", 8.0)),
                height=float(rg.get("height", 3.0)),
                look_at=tuple(rg.get("look_at", (0.0, 0.0, 0.0))),
                image_size=int(rg.get("image_size", 128)),
                focal=float(rg.get("focal", 120.0)),
            )
            nz = data.get("noise", {})
            noise = NoiseSpec(
                label_flip_rate=float(nz.get("label_flip_rate", 0.0)),
                drop_rate=float(nz.get("drop_rate", 0.0)),
                mask_erosion_px=int(nz.get("mask_erosion_px", 0)),
                spurious_rate=float(nz.get("spurious_rate", 0.0)),
                conf_low=float(nz.get("conf_low", 1.0)),
                conf_high=float(nz.get("conf_high", 1.0)),
            )
            return cls(
                seed=int(data["seed"]),
                objects=objects,
                floaters=floaters,
                rig=rig,
                noise=noise,
                min_pixels=int(data.get("min_pixels", 20)),
            )
        except KeyError as exc:
            raise ValueError(f"synth spec missing key: {exc.args[0]}") from exc


# ---------------------------------------------------------------------------
# scene

def generate_scene(spec: SynthSpec):
    """Sample the gaussian scene.

    Returns (scene, gt_ids) where gt_ids[i] is the index of the object that
    owns gaussian i, or FLOATER_ID for junk gaussians.
    """
    centers, scales, ids = [], [], []
    for obj_index, obj in enumerate(spec.objects):
        rng = _rng(spec.seed, _STREAM_OBJECTS, obj_index)
        if obj.shape == "box":
            pts = obj.center + (rng.random((obj.count, 3)) - 0.5) * obj.extent
        else:
            direction = rng.normal(size=(obj.count, 3))
            norms = np.linalg.norm(direction, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            radii = (obj.extent / 2.0) * np.cbrt(rng.random((obj.count, 1)))
            pts = obj.center + direction / norms * radii
        centers.append(pts)
        scales.append(np.full((obj.count, 3), obj.extent / 20.0))
        ids.append(np.full(obj.count, obj_index, dtype=np.int64))

    opacities = [
        np.full(obj.count, obj.opacity) for obj in spec.objects
    ]
    if spec.floaters.count > 0:
        rng = _rng(spec.seed, _STREAM_FLOATERS, 0)
        lo = np.asarray(spec.floaters.low, dtype=np.float64)
        hi = np.asarray(spec.floaters.high, dtype=np.float64)
        pts = lo + rng.random((spec.floaters.count, 3)) * (hi - lo)
        centers.append(pts)
        median_extent = float(np.median([o.extent for o in spec.objects]))
        scales.append(np.full((spec.floaters.count, 3), median_extent / 20.0))
        opacities.append(np.full(spec.floaters.count, spec.floaters.opacity))
        ids.append(np.full(spec.floaters.count, FLOATER_ID, dtype=np.int64))

    all_centers = np.concatenate(centers, axis=0)
    n = all_centers.shape[0]
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    scene = GaussianScene.from_params(
        all_centers,
        np.concatenate(scales, axis=0),
        rotations,
        np.concatenate(opacities, axis=0),
    )
    return scene, np.concatenate(ids, axis=0)


# ---------------------------------------------------------------------------
# cameras

def _matrix_to_quaternion(r: np.ndarray) -> tuple[float, float, float, float]:
    """Unit quaternion (w, x, y, z) for a rotation matrix."""
    t = float(np.trace(r))
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    if q[0] < 0.0:
        q = -q
    return tuple(float(v) for v in q / np.linalg.norm(q))


def look_at_camera(view_id: str, eye, target, width: int, height: int,
                   focal: float) -> CameraView:
    """Camera at eye looking toward target, image y pointing world-down."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise ValueError("eye and target coincide")
    z = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(z, up))) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)  # rows: world-to-camera
    trans = -rot @ eye
    return CameraView(
        view_id=view_id,
        width=width,
        height=height,
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        rotation=_matrix_to_quaternion(rot),
        translation=tuple(float(v) for v in trans),
    )


def generate_views(spec: SynthSpec) -> list[CameraView]:
    rig = spec.rig
    target = np.asarray(rig.look_at, dtype=np.float64)
    views = []
    for k in range(rig.count):
        if rig.kind == "orbit":
            theta = 2.0 * np.pi * k / rig.count
            eye = target + np.array(
                [rig.radius * np.cos(theta), rig.radius * np.sin(theta), rig.height]
            )
        else:
            if rig.count == 1:
                s = 0.0
            else:
                s = -rig.length / 2.0 + rig.length * k / (rig.count - 1)
            eye = target + np.array([s, -rig.radius, rig.height])
        views.append(
            look_at_camera(
                f"v{k:03d}", eye, target, rig.image_size, rig.image_size, rig.focal
            )
        )
    return views


# ---------------------------------------------------------------------------
# masks

def _containment_closure(spec: SynthSpec) -> dict[int, set[int]]:
    """children[i] = indices of objects geometrically inside object i.

    An object is inside another when its center falls within the other's
    volume and its extent is smaller.  The relation is closed transitively
    so a container also absorbs its children's children.
    """
    n = len(spec.objects)
    children: dict[int, set[int]] = {i: set() for i in range(n)}
    for i, host in enumerate(spec.objects):
        hc = np.asarray(host.center, dtype=np.float64)
        for j, other in enumerate(spec.objects):
            if i == j or other.extent >= host.extent:
                continue
            oc = np.asarray(other.center, dtype=np.float64)
            if host.shape == "box":
                inside = bool(np.all(np.abs(oc - hc) <= host.extent / 2.0))
            else:
                inside = float(np.linalg.norm(oc - hc)) <= host.extent / 2.0
            if inside:
                children[i].add(j)
    changed = True
    while changed:
        changed = False
        for i in range(n):
            extra = set()
            for j in children[i]:
                extra |= children[j]
            extra -= children[i]
            extra.discard(i)
            if extra:
                children[i] |= extra
                changed = True
    return children


def _object_regions(spec: SynthSpec, gt_ids: np.ndarray, winner: np.ndarray,
                    children: dict[int, set[int]]) -> dict[int, np.ndarray]:
    """Visible pixel region per object in one view, containment applied."""
    id_map = np.full(winner.shape, BACKGROUND_ID, dtype=np.int64)
    covered = winner >= 0
    id_map[covered] = gt_ids[winner[covered]]
    base = {}
    for i in range(len(spec.objects)):
        base[i] = id_map == i
    regions = {}
    for i in range(len(spec.objects)):
        region = base[i]
        for j in children[i]:
            region = region | base[j]
        if np.count_nonzero(region) >= spec.min_pixels:
            regions[i] = region
    return regions


def _flip_label(label: str, u: float) -> str:
    candidates = [l for l in LABEL_VOCAB if l != label]
    return candidates[min(int(u * len(candidates)), len(candidates) - 1)]


def _spurious_blob(height: int, width: int, cx: float, cy: float,
                   radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2


def generate_masks(spec: SynthSpec, scene: GaussianScene, gt_ids: np.ndarray,
                   views: list[CameraView], near: float = DEFAULT_NEAR):
    """Render every view and emit noisy masks plus noise-free ground truth.

    Returns (mask_sets, gt_sets, gt_boxes): detector-style ViewMaskSets,
    ground-truth RelabeledMaskSets whose object_id is the generating object
    index, and tight ground-truth boxes for detection scoring.

    Per visible object the noise stream consumes exactly five draws
    (drop, flip, flip choice, det conf, seg conf) whether or not the mask
    is dropped, so downstream draws never shift when rates change.
    """
    children = _containment_closure(spec)
    noise = spec.noise
    mask_sets: dict[str, ViewMaskSet] = {}
    gt_sets: dict[str, RelabeledMaskSet] = {}
    gt_boxes: list[BBox] = []

    for view_index, cam in enumerate(views):
        _depth, winner = render_depth_with_ids(scene, cam, near)
        regions = _object_regions(spec, gt_ids, winner, children)
        rng = _rng(spec.seed, _STREAM_NOISE, view_index)

        masks: list[MaskInstance] = []
        gt_masks: list[RelabeledMask] = []
        next_id = 0
        for obj_index in sorted(regions):
            region = regions[obj_index]
            label = spec.objects[obj_index].label
            gt_masks.append(
                RelabeledMask(
                    mask_id=next_id, object_id=obj_index,
                    label=label, region=region,
                )
            )
            rows = np.flatnonzero(region.any(axis=1))
            cols = np.flatnonzero(region.any(axis=0))
            gt_boxes.append(
                BBox(
                    view_id=cam.view_id, label=label, confidence=1.0,
                    x_min=float(cols[0]), y_min=float(rows[0]),
                    x_max=float(cols[-1] + 1), y_max=float(rows[-1] + 1),
                    object_id=obj_index,
                )
            )

            draws = rng.random(5)
            emitted_label = label
            if draws[1] < noise.label_flip_rate:
                emitted_label = _flip_label(label, draws[2])
            det = noise.conf_low + draws[3] * (noise.conf_high - noise.conf_low)
            seg = noise.conf_low + draws[4] * (noise.conf_high - noise.conf_low)
            if draws[0] < noise.drop_rate:
                next_id += 1
                continue
            emitted = region
            if noise.mask_erosion_px > 0:
                emitted = ndimage.binary_erosion(
                    region, iterations=noise.mask_erosion_px
                )
                if not emitted.any():
                    next_id += 1
                    continue
            masks.append(
                MaskInstance(
                    mask_id=next_id, label=emitted_label,
                    det_conf=float(det), seg_conf=float(seg),
                    region=emitted,
                )
            )
            next_id += 1

        if noise.spurious_rate > 0.0:
            n_spurious = int(rng.binomial(len(spec.objects), noise.spurious_rate))
            size = cam.width
            for _ in range(n_spurious):
                d = rng.random(6)
                radius = 2.0 + d[2] * (size / 8.0)
                blob = _spurious_blob(
                    cam.height, cam.width, d[0] * (cam.width - 1),
                    d[1] * (cam.height - 1), radius,
                )
                if not blob.any():
                    continue
                label = LABEL_VOCAB[
                    min(int(d[3] * len(LABEL_VOCAB)), len(LABEL_VOCAB) - 1)
                ]
                det = noise.conf_low + d[4] * (noise.conf_high - noise.conf_low)
                seg = noise.conf_low + d[5] * (noise.conf_high - noise.conf_low)
                masks.append(
                    MaskInstance(
                        mask_id=next_id, label=label,
                        det_conf=float(det), seg_conf=float(seg),
                        region=blob,
                    )
                )
                next_id += 1

        mask_sets[cam.view_id] = ViewMaskSet(
            view_id=cam.view_id, width=cam.width, height=cam.height, masks=masks
        )
        gt_sets[cam.view_id] = RelabeledMaskSet(
            view_id=cam.view_id, width=cam.width, height=cam.height,
            masks=gt_masks,
        )
    return mask_sets, gt_sets, gt_boxes


def generate_views_and_masks(scene: GaussianScene, gt_ids: np.ndarray,
                             spec: SynthSpec, near: float = DEFAULT_NEAR):
    """Cameras plus noisy masks plus noise-free ground truth masks."""
    views = generate_views(spec)
    mask_sets, gt_sets, _boxes = generate_masks(spec, scene, gt_ids, views, near)
    return views, mask_sets, gt_sets


@dataclass
class SynthResult:
    scene: GaussianScene
    gt_ids: np.ndarray
    views: list[CameraView]
    mask_sets: dict[str, ViewMaskSet]
    gt_sets: dict[str, RelabeledMaskSet]
    gt_boxes: list[BBox]


def generate(spec: SynthSpec, near: float = DEFAULT_NEAR) -> SynthResult:
    """Full dataset: scene, cameras, noisy masks, ground truth."""
    scene, gt_ids = generate_scene(spec)
    views = generate_views(spec)
    mask_sets, gt_sets, gt_boxes = generate_masks(spec, scene, gt_ids, views, near)
    return SynthResult(
        scene=scene, gt_ids=gt_ids, views=views,
        mask_sets=mask_sets, gt_sets=gt_sets, gt_boxes=gt_boxes,
    )
