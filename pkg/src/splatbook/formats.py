"""On-disk formats: splat PLY, cameras, masks, codebooks, overlays, depth dumps.

All JSON emitted here is deterministic: sorted keys, fixed indentation, and
gaussian index sets serialized in ascending order.  Writing the same in-memory
state twice produces byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .model import (
    BBox,
    CameraView,
    CodebookObject,
    DepthImage,
    GaussianScene,
    MaskInstance,
    ObjectCodebook,
    RelabeledMask,
    RelabeledMaskSet,
    ViewMaskSet,
)


class FormatError(ValueError):
    """Structurally malformed input (bad header, missing field, bad schema)."""


class DataError(ValueError):
    """Well-formed input carrying invalid values (NaN, bad range, bad counts)."""


_REQUIRED_PLY = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
)

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "short": "<i2", "ushort": "<u2",
    "char": "i1", "uchar": "u1",
    "int8": "i1", "uint8": "u1",
}


def _parse_ply_header(fh, path):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise FormatError(f"{path}: not a PLY file")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise FormatError(f"{path}: unterminated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError(f"{path}: list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property type {tokens[1]!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise FormatError(f"{path}: expected binary_little_endian PLY, got {fmt!r}")
    if count is None:
        raise FormatError(f"{path}: no vertex element in header")
    return count, props


def read_gaussian_ply(path) -> GaussianScene:
    """Parse a binary splat PLY.

    Applies the standard activations: scale = exp(stored), opacity =
    logistic(stored); rotation quaternions (w, x, y, z) are normalized.
    Unknown properties (color harmonics, normals) are skipped.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        count, props = _parse_ply_header(fh, path)
        names = [p[0] for p in props]
        for req in _REQUIRED_PLY:
            if req not in names:
                raise FormatError(f"{path}: missing required property {req!r}")
        dtype = np.dtype(props)
        data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)

    def col(name):
        return np.ascontiguousarray(data[name]).astype(np.float32)

    arrays = {name: col(name) for name in _REQUIRED_PLY}
    for name, arr in arrays.items():
        nan = np.flatnonzero(np.isnan(arr))
        if nan.size:
            raise DataError(
                f"{path}: NaN in property {name!r} at element {int(nan[0])}"
            )

    centers = np.stack([arrays["x"], arrays["y"], arrays["z"]], axis=1)
    log_scales = np.stack(
        [arrays["scale_0"], arrays["scale_1"], arrays["scale_2"]], axis=1
    )
    rotations = np.stack(
        [arrays["rot_0"], arrays["rot_1"], arrays["rot_2"], arrays["rot_3"]], axis=1
    )
    try:
        return GaussianScene(centers, log_scales, rotations, arrays["opacity"])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_gaussian_ply(scene: GaussianScene, path):
    """Write a scene back to PLY; exact inverse of read_gaussian_ply."""
    path = Path(path)
    centers, log_scales, rotations, logit_op = scene.raw_arrays
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _REQUIRED_PLY]
    header.append("end_header")
    dtype = np.dtype([(name, "<f4") for name in _REQUIRED_PLY])
    out = np.empty(n, dtype=dtype)
    out["x"], out["y"], out["z"] = centers[:, 0], centers[:, 1], centers[:, 2]
    for i in range(3):
        out[f"scale_{i}"] = log_scales[:, i]
    for i in range(4):
        out[f"rot_{i}"] = rotations[:, i]
    out["opacity"] = logit_op
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(out.tobytes())


# ---------------------------------------------------------------------------
# cameras

def read_cameras(path) -> list[CameraView]:
    """Load a camera list from JSON, sorted ascending by view_id."""
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of camera records")
    views = []
    seen = set()
    for rec in data:
        try:
            view = CameraView(
                view_id=rec["view_id"],
                width=int(rec["width"]),
                height=int(rec["height"]),
                fx=float(rec["fx"]),
                fy=float(rec["fy"]),
                cx=float(rec["cx"]),
                cy=float(rec["cy"]),
                rotation=(rec["qw"], rec["qx"], rec["qy"], rec["qz"]),
                translation=(rec["tx"], rec["ty"], rec["tz"]),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: camera record missing key {exc}") from exc
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if view.view_id in seen:
            raise DataError(f"{path}: duplicate view_id {view.view_id!r}")
        seen.add(view.view_id)
        views.append(view)
    return sorted(views, key=lambda v: v.view_id)


def write_cameras(views, path):
    records = []
    for v in sorted(views, key=lambda v: v.view_id):
        qw, qx, qy, qz = v.rotation
        tx, ty, tz = v.translation
        records.append(
            {
                "view_id": v.view_id,
                "width": v.width, "height": v.height,
                "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
                "qw": qw, "qx": qx, "qy": qy, "qz": qz,
                "tx": tx, "ty": ty, "tz": tz,
            }
        )
    _dump_json(records, path)


# ---------------------------------------------------------------------------
# run-length encoding (column-major, counts alternate starting with background)

def rle_encode(region: np.ndarray) -> dict:
    region = np.asarray(region, dtype=bool)
    h, w = region.shape
    flat = region.ravel(order="F")
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts = [0] + counts  # runs must start with a background count
    return {"size": [h, w], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed RLE record: {exc}") from exc
    if any(c < 0 for c in counts):
        raise DataError("negative RLE count")
    total = sum(counts)
    if total != h * w:
        raise DataError(f"RLE counts sum to {total}, expected {h * w}")
    values = np.repeat(np.arange(len(counts), dtype=np.int64) % 2, counts)
    return values.reshape((h, w), order="F").astype(bool)


# ---------------------------------------------------------------------------
# masks

def read_masks(path) -> ViewMaskSet:
    """Load one view's detected masks from JSON."""
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    try:
        view_id = data["view_id"]
        height = int(data["height"])
        width = int(data["width"])
        raw_masks = data["masks"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed mask file: {exc}") from exc
    masks = []
    for rec in raw_masks:
        try:
            region = rle_decode(rec["rle"])
            mask = MaskInstance(
                mask_id=int(rec["mask_id"]),
                label=str(rec["label"]),
                det_conf=float(rec["det_conf"]),
                seg_conf=float(rec["seg_conf"]),
                region=region,
            )
        except KeyError as exc:
            raise FormatError(f"{path}: mask record missing key {exc}") from exc
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        masks.append(mask)
    try:
        return ViewMaskSet(view_id=view_id, width=width, height=height, masks=masks)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_masks(mask_set: ViewMaskSet, path):
    records = []
    for m in mask_set.masks:
        records.append(
            {
                "mask_id": m.mask_id,
                "label": m.label,
                "det_conf": m.det_conf,
                "seg_conf": m.seg_conf,
                "rle": rle_encode(m.region),
            }
        )
    _dump_json(
        {
            "view_id": mask_set.view_id,
            "height": mask_set.height,
            "width": mask_set.width,
            "masks": records,
        },
        path,
    )


def read_mask_dir(dirpath) -> dict[str, ViewMaskSet]:
    """Load every *.json mask file from a directory, keyed by view_id."""
    dirpath = Path(dirpath)
    out: dict[str, ViewMaskSet] = {}
    for p in sorted(dirpath.glob("*.json")):
        ms = read_masks(p)
        if ms.view_id in out:
            raise DataError(f"{dirpath}: duplicate view_id {ms.view_id!r}")
        out[ms.view_id] = ms
    return out


# ---------------------------------------------------------------------------
# relabeled masks

def read_relabeled(path) -> RelabeledMaskSet:
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    try:
        masks = []
        for rec in data["masks"]:
            oid = rec["object_id"]
            masks.append(
                RelabeledMask(
                    mask_id=int(rec["mask_id"]),
                    object_id=None if oid is None else int(oid),
                    label=rec["label"],
                    region=rle_decode(rec["rle"]),
                )
            )
        return RelabeledMaskSet(
            view_id=data["view_id"],
            width=int(data["width"]),
            height=int(data["height"]),
            masks=masks,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed relabeled mask file: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_relabeled(mask_set: RelabeledMaskSet, path):
    records = []
    for m in mask_set.masks:
        records.append(
            {
                "mask_id": m.mask_id,
                "object_id": m.object_id,
                "label": m.label,
                "rle": rle_encode(m.region),
            }
        )
    _dump_json(
        {
            "view_id": mask_set.view_id,
            "height": mask_set.height,
            "width": mask_set.width,
            "masks": records,
        },
        path,
    )


def read_relabeled_dir(dirpath) -> dict[str, RelabeledMaskSet]:
    dirpath = Path(dirpath)
    out: dict[str, RelabeledMaskSet] = {}
    for p in sorted(dirpath.glob("*.json")):
        ms = read_relabeled(p)
        if ms.view_id in out:
            raise DataError(f"{dirpath}: duplicate view_id {ms.view_id!r}")
        out[ms.view_id] = ms
    return out


# ---------------------------------------------------------------------------
# codebooks

def codebook_to_dict(codebook: ObjectCodebook) -> dict:
    objects = []
    for obj in sorted(codebook.objects, key=lambda o: o.object_id):
        indices = sorted(int(i) for i in obj.gaussian_indices)
        objects.append(
            {
                "object_id": obj.object_id,
                "final_label": obj.final_label,
                "object_confidence": obj.object_confidence,
                "gaussian_indices": indices,
                "gaussian_weights": [float(obj.gaussian_weights[i]) for i in indices],
                "label_votes": {k: float(v) for k, v in obj.label_votes.items()},
                "mask_refs": [
                    [view_id, int(mask_id), float(conf)]
                    for view_id, mask_id, conf in obj.mask_refs
                ],
            }
        )
    return {"objects": objects}


def write_codebook(codebook: ObjectCodebook, path):
    _dump_json(codebook_to_dict(codebook), path)


def read_codebook(path) -> ObjectCodebook:
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    try:
        objects = []
        for rec in data["objects"]:
            indices = [int(i) for i in rec["gaussian_indices"]]
            weights = [float(w) for w in rec["gaussian_weights"]]
            if len(indices) != len(weights):
                raise DataError(
                    f"{path}: object {rec['object_id']}: weight list length mismatch"
                )
            obj = CodebookObject(
                object_id=int(rec["object_id"]),
                gaussian_indices=set(indices),
                gaussian_weights=dict(zip(indices, weights)),
                label_votes={str(k): float(v) for k, v in rec["label_votes"].items()},
                mask_refs=[
                    (str(v), int(m), float(c)) for v, m, c in rec["mask_refs"]
                ],
                final_label=rec["final_label"],
                object_confidence=rec["object_confidence"],
            )
            objects.append(obj)
        next_id = 1 + max((o.object_id for o in objects), default=-1)
        book = ObjectCodebook(objects=objects, next_id=next_id)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed codebook: {exc}") from exc
    try:
        book.check()
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return book


# ---------------------------------------------------------------------------
# boxes

def write_boxes(boxes, path):
    records = []
    order = sorted(boxes, key=lambda b: (b.view_id, b.label, -b.confidence,
                                         b.x_min, b.y_min))
    for b in order:
        records.append(
            {
                "view_id": b.view_id,
                "object_id": b.object_id,
                "label": b.label,
                "confidence": b.confidence,
                "x_min": b.x_min, "y_min": b.y_min,
                "x_max": b.x_max, "y_max": b.y_max,
            }
        )
    _dump_json({"boxes": records}, path)


def read_boxes(path) -> list[BBox]:
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    try:
        out = []
        for rec in data["boxes"]:
            oid = rec.get("object_id")
            out.append(
                BBox(
                    view_id=str(rec["view_id"]),
                    label=str(rec["label"]),
                    confidence=float(rec.get("confidence", 1.0)),
                    x_min=float(rec["x_min"]), y_min=float(rec["y_min"]),
                    x_max=float(rec["x_max"]), y_max=float(rec["y_max"]),
                    object_id=None if oid is None else int(oid),
                )
            )
        return out
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed box file: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# depth dumps (debug): 8-byte header (u32 LE height, width), float32 raster

def write_depth_raster(depth: DepthImage, path):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", depth.height, depth.width))
        fh.write(depth.values.astype("<f4").tobytes())


def read_depth_raster(path) -> DepthImage:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated depth raster header")
        h, w = struct.unpack("<II", header)
        payload = fh.read()
    expected = h * w * 4
    if len(payload) != expected:
        raise DataError(
            f"{path}: depth payload is {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)
    return DepthImage(values=values)


# ---------------------------------------------------------------------------
# overlays

def color_for_id(object_id: int) -> tuple[int, int, int]:
    """Deterministic mid-brightness RGB for an object id (stable across runs)."""
    digest = hashlib.md5(f"splatbook-{object_id}".encode()).digest()
    return tuple(64 + (b % 160) for b in digest[:3])


def write_overlay(size: tuple[int, int], items, path):
    """Render masks or boxes onto a black canvas.

    size is (width, height).  items is either (object_id, label, region)
    triples or BBox instances; a JSON sidecar records ids, labels and colors.
    Boxes are drawn as 2 px strokes; no text is rendered.
    """
    width, height = size
    img = Image.new("RGB", (width, height), (0, 0, 0))
    sidecar = []
    boxes = [it for it in items if isinstance(it, BBox)]
    regions = [it for it in items if not isinstance(it, BBox)]

    if regions:
        canvas = np.zeros((height, width, 3), dtype=np.uint8)
        for object_id, label, region in sorted(regions, key=lambda r: r[0]):
            color = color_for_id(object_id)
            canvas[np.asarray(region, dtype=bool)] = color
            sidecar.append({"object_id": object_id, "label": label,
                            "color": list(color)})
        img = Image.fromarray(canvas, "RGB")

    if boxes:
        draw = ImageDraw.Draw(img)
        order = sorted(
            boxes,
            key=lambda b: (b.object_id if b.object_id is not None else -1,
                           b.label, b.x_min),
        )
        for b in order:
            color = color_for_id(b.object_id if b.object_id is not None else 0)
            draw.rectangle(
                [b.x_min, b.y_min, b.x_max, b.y_max], outline=color, width=2
            )
            sidecar.append(
                {
                    "object_id": b.object_id,
                    "label": b.label,
                    "confidence": b.confidence,
                    "color": list(color),
                }
            )

    path = Path(path)
    img.save(path, format="PNG")
    _dump_json(sidecar, path.with_suffix(".json"))


# ---------------------------------------------------------------------------

def _dump_json(payload, path):
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
