"""Shared domain types for the splat-codebook pipeline.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward.  Pixel (0, 0) is the top-left
  corner of the image and pixel centers sit at integer coordinates.
* Rasters are numpy arrays indexed [row, col], i.e. [y, x].
* Gaussians are addressed by their index in the scene's input order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy.special import expit, logit

#: Stage names accepted by ablation tooling, mapped to config toggle fields.
STAGE_TOGGLES = {
    "depth-test": "enable_depth_test",
    "semantic-constraint": "enable_semantic_constraint",
    "filter1": "enable_filter1",
    "spatial-merge": "enable_spatial_merge",
    "filter2": "enable_filter2",
    "object-filter": "enable_object_filter",
    "outlier-removal": "enable_outlier_removal",
}

_POSTPROCESS_MODES = ("auto", "on", "off")


def _unit_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape != (4,):
        raise ValueError("quaternion must have exactly 4 components (w, x, y, z)")
    norm = float(np.linalg.norm(q))
    if not math.isfinite(norm) or norm == 0.0:
        raise ValueError("quaternion norm must be finite and non-zero")
    return q / norm


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix for a unit quaternion given as (w, x, y, z)."""
    w, x, y, z = _unit_quaternion(q)
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian with activations already applied."""

    center: tuple[float, float, float]
    scale: tuple[float, float, float]
    rotation: tuple[float, float, float, float]  # unit quaternion, (w, x, y, z)
    opacity: float

    def __post_init__(self):
        if any(not math.isfinite(c) for c in self.center):
            raise ValueError("gaussian center must be finite")
        if any(s <= 0.0 or not math.isfinite(s) for s in self.scale):
            raise ValueError("gaussian scale must be positive and finite")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("gaussian opacity must lie in [0, 1]")
        q = _unit_quaternion(self.rotation)
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))


class GaussianScene:
    """An ordered splat cloud backed by numpy arrays.

    The raw (pre-activation) float32 values are retained so that writing the
    scene back to disk is an exact inverse of parsing it: scale is stored as
    log(scale), opacity as logit(opacity).  All pipeline math runs on the
    activated float64 views.
    """

    def __init__(self, raw_centers, raw_log_scales, raw_rotations, raw_logit_opacities):
        raw_centers = np.ascontiguousarray(raw_centers, dtype=np.float32)
        raw_log_scales = np.ascontiguousarray(raw_log_scales, dtype=np.float32)
        raw_rotations = np.ascontiguousarray(raw_rotations, dtype=np.float32)
        raw_logit_opacities = np.ascontiguousarray(raw_logit_opacities, dtype=np.float32)
        n = raw_centers.shape[0]
        if raw_centers.shape != (n, 3):
            raise ValueError("centers must have shape (n, 3)")
        if raw_log_scales.shape != (n, 3):
            raise ValueError("scales must have shape (n, 3)")
        if raw_rotations.shape != (n, 4):
            raise ValueError("rotations must have shape (n, 4)")
        if raw_logit_opacities.shape != (n,):
            raise ValueError("opacities must have shape (n,)")

        self._raw_centers = raw_centers
        self._raw_log_scales = raw_log_scales
        self._raw_rotations = raw_rotations
        self._raw_logit_opacities = raw_logit_opacities

        self.centers = raw_centers.astype(np.float64)
        self.scales = np.exp(raw_log_scales.astype(np.float64))
        rot = raw_rotations.astype(np.float64)
        norms = np.linalg.norm(rot, axis=1)
        if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
            bad = int(np.flatnonzero((norms == 0.0) | ~np.isfinite(norms))[0])
            raise ValueError(f"rotation quaternion at element {bad} has invalid norm")
        self.rotations = rot / norms[:, None]
        self.opacities = expit(raw_logit_opacities.astype(np.float64))

    @classmethod
    def from_params(cls, centers, scales, rotations, opacities) -> "GaussianScene":
        """Build a scene from activated values; raw storage is derived once."""
        centers = np.asarray(centers, dtype=np.float64)
        scales = np.asarray(scales, dtype=np.float64)
        rotations = np.asarray(rotations, dtype=np.float64)
        opacities = np.asarray(opacities, dtype=np.float64)
        if np.any(scales <= 0.0):
            raise ValueError("scales must be positive")
        if np.any(opacities < 0.0) or np.any(opacities > 1.0):
            raise ValueError("opacities must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            raw_op = logit(opacities)
        return cls(
            centers.astype(np.float32),
            np.log(scales).astype(np.float32),
            rotations.astype(np.float32),
            raw_op.astype(np.float32),
        )

    @property
    def raw_arrays(self):
        """(centers, log_scales, rotations, logit_opacities) as stored float32."""
        return (
            self._raw_centers,
            self._raw_log_scales,
            self._raw_rotations,
            self._raw_logit_opacities,
        )

    def __len__(self) -> int:
        return self.centers.shape[0]

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=tuple(float(v) for v in self.centers[index]),
            scale=tuple(float(v) for v in self.scales[index]),
            rotation=tuple(float(v) for v in self.rotations[index]),
            opacity=float(self.opacities[index]),
        )

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self.primitive(i)


@dataclass(frozen=True)
class CameraView:
    """A posed pinhole camera.  rotation/translation map world to camera."""

    view_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: tuple[float, float, float, float]  # world-to-camera, (w, x, y, z)
    translation: tuple[float, float, float]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"view {self.view_id}: image dimensions must be positive")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")
        q = _unit_quaternion(self.rotation)
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))
        object.__setattr__(
            self, "translation", tuple(float(v) for v in self.translation)
        )

    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation)


@dataclass(frozen=True)
class MaskInstance:
    """One 2D instance mask in one view."""

    mask_id: int
    label: str
    det_conf: float
    seg_conf: float
    region: np.ndarray  # bool raster, shape (height, width)

    def __post_init__(self):
        if not (0.0 <= self.det_conf <= 1.0):
            raise ValueError(f"mask {self.mask_id}: det_conf outside [0, 1]")
        if not (0.0 <= self.seg_conf <= 1.0):
            raise ValueError(f"mask {self.mask_id}: seg_conf outside [0, 1]")
        region = np.asarray(self.region, dtype=bool)
        if region.ndim != 2:
            raise ValueError(f"mask {self.mask_id}: region must be a 2D raster")
        if not region.any():
            raise ValueError(f"mask {self.mask_id}: region is empty")
        object.__setattr__(self, "region", region)

    @property
    def confidence(self) -> float:
        # detector confidence times segmentation confidence, by definition
        return self.det_conf * self.seg_conf


@dataclass
class ViewMaskSet:
    """All detected masks of one view."""

    view_id: str
    width: int
    height: int
    masks: list[MaskInstance]

    def __post_init__(self):
        seen = set()
        for m in self.masks:
            if m.mask_id in seen:
                raise ValueError(
                    f"view {self.view_id}: duplicate mask_id {m.mask_id}"
                )
            seen.add(m.mask_id)
            if m.region.shape != (self.height, self.width):
                raise ValueError(
                    f"view {self.view_id}: mask {m.mask_id} region shape "
                    f"{m.region.shape} does not match view ({self.height}, {self.width})"
                )
        self.masks = sorted(self.masks, key=lambda m: m.mask_id)


@dataclass
class DepthImage:
    """Per-pixel median splat depth; +inf marks pixels no splat covers."""

    values: np.ndarray  # float64, shape (height, width)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("depth raster must be 2D")
        finite = values[np.isfinite(values)]
        if finite.size and not np.all(finite > 0.0):
            raise ValueError("finite depth values must be positive")
        self.values = values

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass
class ToleranceMap:
    """Per-pixel adaptive depth tolerance; zero outside the mask region."""

    values: np.ndarray  # float64, shape (height, width)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("tolerance raster must be 2D")
        if values.size and float(values.min()) < 0.0:
            raise ValueError("tolerances must be non-negative")
        self.values = values


@dataclass
class MaskAssociation:
    """The 3D evidence extracted from one 2D mask."""

    view_id: str
    mask_id: int
    gaussian_indices: set[int]
    weight: float
    label: str
    confidence: float


@dataclass
class CodebookObject:
    """One 3D object hypothesis: a gaussian index set plus voting state."""

    object_id: int
    gaussian_indices: set[int] = field(default_factory=set)
    gaussian_weights: dict[int, float] = field(default_factory=dict)
    label_votes: dict[str, float] = field(default_factory=dict)
    mask_refs: list[tuple[str, int, float]] = field(default_factory=list)
    final_label: str | None = None
    object_confidence: float | None = None

    def check(self):
        if set(self.gaussian_weights) != self.gaussian_indices:
            raise ValueError(
                f"object {self.object_id}: weight keys do not match the index set"
            )
        if any(w < 0.0 for w in self.gaussian_weights.values()):
            raise ValueError(f"object {self.object_id}: negative gaussian weight")

    def best_vote(self) -> str | None:
        """Current winning label: highest summed confidence, ties lexicographic."""
        if not self.label_votes:
            return None
        return min(self.label_votes, key=lambda k: (-self.label_votes[k], k))


@dataclass
class ObjectCodebook:
    """Ordered collection of codebook objects with a monotone id counter."""

    objects: list[CodebookObject] = field(default_factory=list)
    next_id: int = 0

    def new_object(self) -> CodebookObject:
        obj = CodebookObject(object_id=self.next_id)
        self.next_id += 1
        self.objects.append(obj)
        return obj

    def check(self):
        ids = [o.object_id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate object ids in codebook")
        if ids and max(ids) >= self.next_id:
            raise ValueError("next_id must exceed every existing object id")
        for o in self.objects:
            o.check()

    def mask_lookup(self) -> dict[tuple[str, int], CodebookObject]:
        out: dict[tuple[str, int], CodebookObject] = {}
        for obj in self.objects:
            for view_id, mask_id, _conf in obj.mask_refs:
                out[(view_id, mask_id)] = obj
        return out


@dataclass(frozen=True)
class RelabeledMask:
    """A mask after codebook relabeling; unassigned masks keep a null id."""

    mask_id: int
    object_id: int | None
    label: str | None
    region: np.ndarray

    def __post_init__(self):
        region = np.asarray(self.region, dtype=bool)
        if region.ndim != 2:
            raise ValueError(f"mask {self.mask_id}: region must be a 2D raster")
        object.__setattr__(self, "region", region)


@dataclass
class RelabeledMaskSet:
    view_id: str
    width: int
    height: int
    masks: list[RelabeledMask]


@dataclass(frozen=True)
class BBox:
    """An axis-aligned detection box in continuous pixel coordinates."""

    view_id: str
    label: str
    confidence: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    object_id: int | None = None

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("degenerate box: min exceeds max")

    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline thresholds and stage toggles.

    Defaults follow the shipped operating point; see config_defaults().
    """

    tau_overlap: float = 0.2
    tau_filter1: float = 0.4
    tau_spatial: float = 0.3
    tau_filter2: float = 0.3
    tau_object: float = 0.8
    depth_bound: float = 0.5       # cap on neighborhood depth differences
    half_width: int = 3            # tolerance neighborhood half-width
    min_pts: int = 6               # clustering density parameter
    near: float = 0.01             # camera near plane, world units
    postprocess_mode: str = "auto"
    enable_depth_test: bool = True
    enable_semantic_constraint: bool = True
    enable_filter1: bool = True
    enable_spatial_merge: bool = True
    enable_filter2: bool = True
    enable_object_filter: bool = True
    enable_outlier_removal: bool = True

    def validate(self) -> "PipelineConfig":
        for name in ("tau_overlap", "tau_filter1", "tau_spatial", "tau_filter2", "tau_object"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")
        if self.depth_bound <= 0.0:
            raise ValueError("depth_bound must be positive")
        if self.half_width < 0:
            raise ValueError("half_width must be non-negative")
        if self.min_pts < 2:
            raise ValueError("min_pts must be at least 2")
        if self.near <= 0.0:
            raise ValueError("near plane must be positive")
        if self.postprocess_mode not in _POSTPROCESS_MODES:
            raise ValueError(
                f"postprocess_mode must be one of {_POSTPROCESS_MODES}"
            )
        return self

    def disable(self, stage: str) -> "PipelineConfig":
        """Return a copy with one named stage switched off."""
        if stage not in STAGE_TOGGLES:
            raise ValueError(
                f"unknown stage {stage!r}; valid stages: {', '.join(sorted(STAGE_TOGGLES))}"
            )
        return replace(self, **{STAGE_TOGGLES[stage]: False})


def config_defaults() -> PipelineConfig:
    """The default operating point used by the CLI and tests."""
    return PipelineConfig().validate()


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a config from a JSON-style dict, starting from the defaults."""
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    valid = {f for f in PipelineConfig.__dataclass_fields__}
    unknown = set(data) - valid
    if unknown:
        raise ValueError(
            f"unknown config keys: {', '.join(sorted(unknown))}"
        )
    return replace(config_defaults(), **data).validate()
