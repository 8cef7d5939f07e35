"""Object codebooks for gaussian-splat scenes.

Turns per-view 2D instance masks, which carry no identity across
viewpoints, plus a 3D gaussian scene into a codebook of 3D object
instances.  The codebook relabels every input mask with a persistent
object id, projects objects back into any view as labeled boxes, and
ships with evaluation tooling and a synthetic data generator.
"""
from .model import (
    BBox,
    CameraView,
    CodebookObject,
    DepthImage,
    GaussianPrimitive,
    GaussianScene,
    MaskAssociation,
    MaskInstance,
    ObjectCodebook,
    PipelineConfig,
    RelabeledMask,
    RelabeledMaskSet,
    STAGE_TOGGLES,
    ToleranceMap,
    ViewMaskSet,
    config_defaults,
    config_from_dict,
    quaternion_to_matrix,
)
from .render import (
    ProjectedGaussian,
    ProjectedScene,
    UncoveredMaskError,
    mask_mean_depth,
    project_gaussian,
    project_scene,
    render_depth,
    render_depth_with_ids,
    unproject_pixel,
)
from .association import gaussians_for_mask, landing_pixels, tolerance_map
from .codebook import (
    build_codebook,
    distinct_mask_labels,
    filter_low_weight,
    relabel_masks,
    resolve_postprocess,
    semantic_merge_step,
    spatial_merge,
    vote_label,
)
from .clustering import (
    ClusteringParams,
    hdbscan_eps,
    kdist_curve,
    kneedle_elbow,
)
from .postprocess import (
    estimate_eps,
    filter_objects,
    object_confidence,
    remove_spatial_outliers,
)
from .evaluation import (
    AssociationReport,
    DetectionReport,
    batch_f1,
    bbox_from_object,
    box_iou,
    boxes_for_view,
    detection_metrics,
    mask_metrics,
    match_objects,
)
from .synthgen import (
    CameraRig,
    FloaterSpec,
    LABEL_VOCAB,
    NoiseSpec,
    SynthObject,
    SynthResult,
    SynthSpec,
    generate,
    generate_masks,
    generate_scene,
    generate_views,
    generate_views_and_masks,
    look_at_camera,
)
from . import formats

__version__ = "0.1.0"

__all__ = [
    "BBox", "CameraView", "CodebookObject", "DepthImage",
    "GaussianPrimitive", "GaussianScene", "MaskAssociation", "MaskInstance",
    "ObjectCodebook", "PipelineConfig", "RelabeledMask", "RelabeledMaskSet",
    "STAGE_TOGGLES", "ToleranceMap", "ViewMaskSet",
    "config_defaults", "config_from_dict", "quaternion_to_matrix",
    "ProjectedGaussian", "ProjectedScene", "UncoveredMaskError",
    "mask_mean_depth", "project_gaussian", "project_scene",
    "render_depth", "render_depth_with_ids", "unproject_pixel",
    "gaussians_for_mask", "landing_pixels", "tolerance_map",
    "build_codebook", "distinct_mask_labels", "filter_low_weight",
    "relabel_masks", "resolve_postprocess", "semantic_merge_step",
    "spatial_merge", "vote_label",
    "ClusteringParams", "hdbscan_eps", "kdist_curve", "kneedle_elbow",
    "estimate_eps", "filter_objects", "object_confidence",
    "remove_spatial_outliers",
    "AssociationReport", "DetectionReport", "batch_f1", "bbox_from_object",
    "box_iou", "boxes_for_view", "detection_metrics", "mask_metrics",
    "match_objects",
    "CameraRig", "FloaterSpec", "LABEL_VOCAB", "NoiseSpec", "SynthObject",
    "SynthResult", "SynthSpec", "generate", "generate_masks",
    "generate_scene", "generate_views", "generate_views_and_masks",
    "look_at_camera",
    "formats",
    "__version__",
]
