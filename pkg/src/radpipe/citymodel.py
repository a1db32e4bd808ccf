"""Semantic 3D city model subset: parsing, semantic grouping, raycast
semantic-depth maps, and lane projection onto the polar RA grid.

Two on-disk formats are supported (see docs/formats.md): a small XML subset
("gml_lite") and an equivalent JSON structure. Geometry is triangle soup in
ENU meters; every object carries a semantic class label and an LOD level.
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .ramap import RAMap, SensorPose

DEFAULT_MAX_RANGE = 35.0  # m, radar's maximum detection range
LANE_CLASSES = ("driving_lane", "bicycle_lane", "sidewalk")

_DEGENERATE_AREA = 1e-12


class CityModelError(ValueError):
    """Base error for city model parsing and validation."""


class ParseError(CityModelError):
    """Malformed document (XML/JSON syntax or structure)."""


class GeometryError(CityModelError):
    """Well-formed document with invalid geometry."""


@dataclass
class SemanticObject:
    id: str
    class_label: str
    lod: int
    mesh: np.ndarray  # (n_triangles, 3 vertices, 3 coords), ENU meters
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class CityModel:
    objects: list[SemanticObject]

    @property
    def classes(self) -> list[str]:
        """Deterministic semantic vocabulary: sorted unique class labels."""
        return sorted({obj.class_label for obj in self.objects})

    @property
    def n_triangles(self) -> int:
        return sum(len(obj.mesh) for obj in self.objects)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera used for raycasting the city model."""

    width: int = 64
    height: int = 48
    horizontal_fov: float = 120.0  # deg total
    vertical_fov: float = 90.0     # deg total

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1 pixel")
        if not (0 < self.horizontal_fov < 180 and 0 < self.vertical_fov < 180):
            raise ValueError("fields of view must lie in (0, 180) degrees")


@dataclass
class SDM:
    """Semantic-depth map: one-hot semantic channels plus metric depth.

    mask is True where a surface was hit within max_range; everywhere else
    the semantic channels are zero and depth holds the 0.0 sentinel.
    """

    semantic: np.ndarray   # (n_classes, H, W) one-hot floats
    depth: np.ndarray      # (H, W) meters, 0.0 where masked out
    mask: np.ndarray       # (H, W) bool, True = valid hit within range
    class_order: list[str]


def _triangles_from_floats(values: list[float], obj_id: str) -> np.ndarray:
    if len(values) % 9 != 0:
        raise GeometryError(
            f"object {obj_id!r}: posList has {len(values)} floats, "
            "expected a multiple of 9 (three 3D vertices per triangle)"
        )
    tris = np.asarray(values, dtype=float).reshape(-1, 3, 3)
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
    )
    bad = np.nonzero(areas <= _DEGENERATE_AREA)[0]
    if bad.size:
        raise GeometryError(f"object {obj_id!r}: degenerate triangle at index {bad[0]}")
    return tris


def _parse_floats(text: str, obj_id: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise GeometryError(f"object {obj_id!r}: bad coordinate in posList: {exc}") from exc


def _check_object(obj_id: str, class_label: str, lod, seen: set[str]) -> int:
    if not class_label:
        raise ParseError(f"object {obj_id!r}: empty class label")
    if obj_id in seen:
        raise ParseError(f"duplicate object id {obj_id!r}")
    seen.add(obj_id)
    try:
        lod_int = int(lod)
    except (TypeError, ValueError):
        raise ParseError(f"object {obj_id!r}: lod {lod!r} is not an integer") from None
    if not 0 <= lod_int <= 3:
        raise ParseError(f"object {obj_id!r}: lod {lod_int} outside 0..3")
    return lod_int


def _parse_gml_lite(document: bytes) -> CityModel:
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(f"malformed XML at line {line}, column {col}: {exc}") from exc

    objects = []
    seen: set[str] = set()
    for idx, elem in enumerate(root.iter("cityObject")):
        obj_id = elem.get("id", f"object-{idx}")
        lod = _check_object(obj_id, elem.get("class", ""), elem.get("lod", "0"), seen)
        values: list[float] = []
        for pos in elem.iter("posList"):
            values.extend(_parse_floats(pos.text or "", obj_id))
        attributes = {
            a.get("name", ""): (a.text or "") for a in elem.iter("attribute")
        }
        objects.append(SemanticObject(
            id=obj_id, class_label=elem.get("class", ""), lod=lod,
            mesh=_triangles_from_floats(values, obj_id), attributes=attributes,
        ))
    return CityModel(objects=objects)


def _parse_json(document: bytes) -> CityModel:
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict) or "cityObjects" not in raw:
        raise ParseError("top-level object must contain a 'cityObjects' list")

    objects = []
    seen: set[str] = set()
    for idx, entry in enumerate(raw["cityObjects"]):
        obj_id = str(entry.get("id", f"object-{idx}"))
        lod = _check_object(obj_id, entry.get("class", ""), entry.get("lod", 0), seen)
        values = entry.get("posList", [])
        if not all(isinstance(v, (int, float)) for v in values):
            raise GeometryError(f"object {obj_id!r}: posList must be numeric")
        attributes = {str(k): str(v) for k, v in entry.get("attributes", {}).items()}
        objects.append(SemanticObject(
            id=obj_id, class_label=entry["class"], lod=lod,
            mesh=_triangles_from_floats([float(v) for v in values], obj_id),
            attributes=attributes,
        ))
    return CityModel(objects=objects)


def parse_city_model(document: bytes, format: str = "gml_lite") -> CityModel:
    """Parse a city model document in 'gml_lite' (XML) or 'json' format."""
    if format == "gml_lite":
        return _parse_gml_lite(document)
    if format == "json":
        return _parse_json(document)
    raise ValueError(f"unknown format {format!r}, expected 'gml_lite' or 'json'")


def city_model_to_gml(model: CityModel) -> bytes:
    """Serialize to the gml_lite XML subset (round-trips through the parser)."""
    lines = ["<cityModel>"]
    for obj in model.objects:
        lines.append(
            f"  <cityObject id={quoteattr(obj.id)} class={quoteattr(obj.class_label)}"
            f" lod=\"{obj.lod}\">"
        )
        coords = " ".join(repr(float(v)) for v in obj.mesh.reshape(-1))
        lines.append(f"    <posList>{coords}</posList>")
        for key, value in obj.attributes.items():
            lines.append(
                f"    <attribute name={quoteattr(key)}>{escape(value)}</attribute>"
            )
        lines.append("  </cityObject>")
    lines.append("</cityModel>")
    return "\n".join(lines).encode("utf-8")


def city_model_to_json(model: CityModel) -> bytes:
    entries = [
        {
            "id": obj.id,
            "class": obj.class_label,
            "lod": obj.lod,
            "posList": [float(v) for v in obj.mesh.reshape(-1)],
            "attributes": obj.attributes,
        }
        for obj in model.objects
    ]
    return json.dumps({"cityObjects": entries}, indent=1).encode("utf-8")


def group_by_semantics(model: CityModel) -> dict[str, np.ndarray]:
    """Merge meshes per class label; total triangle count is preserved."""
    groups: dict[str, list[np.ndarray]] = {}
    for obj in model.objects:
        groups.setdefault(obj.class_label, []).append(obj.mesh)
    return {
        label: np.concatenate(meshes, axis=0) for label, meshes in groups.items()
    }


def _camera_rays(pose: SensorPose, cam: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions, shape (H, W, 3). Pixel (H//2, W//2) looks exactly
    along boresight (FFT-shift pixel convention, matching the RA azimuth axis)."""
    fx = (cam.width / 2.0) / math.tan(math.radians(cam.horizontal_fov) / 2.0)
    fy = (cam.height / 2.0) / math.tan(math.radians(cam.vertical_fov) / 2.0)
    u = (np.arange(cam.width) - cam.width // 2) / fx
    v = (np.arange(cam.height) - cam.height // 2) / fy

    heading = pose.heading
    forward = np.array([math.cos(heading), math.sin(heading), 0.0])
    right = np.array([math.sin(heading), -math.cos(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])

    dirs = (
        forward[None, None, :]
        + u[None, :, None] * right[None, None, :]
        - v[:, None, None] * up[None, None, :]
    )
    return dirs / np.linalg.norm(dirs, axis=2, keepdims=True)


def _intersect_rays(origin: np.ndarray, dirs: np.ndarray, tris: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ray-triangle hit (Moeller-Trumbore) for each ray.

    dirs: (R, 3) unit vectors; tris: (T, 3, 3). Returns (t, tri_index) with
    t = +inf and index = -1 for misses.
    """
    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=int)
    if len(tris) == 0:
        return best_t, best_tri

    edge1 = tris[:, 1] - tris[:, 0]  # (T, 3)
    edge2 = tris[:, 2] - tris[:, 0]
    tvec = origin[None, :] - tris[:, 0]  # (T, 3)

    # chunk over rays to bound the (rays x triangles) temporaries
    chunk = max(1, 2_000_000 // max(len(tris), 1))
    for start in range(0, n_rays, chunk):
        d = dirs[start:start + chunk]  # (R, 3)
        pvec = np.cross(d[:, None, :], edge2[None, :, :])        # (R, T, 3)
        det = np.einsum("tk,rtk->rt", edge1, pvec)
        ok = np.abs(det) > 1e-12
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("tk,rtk->rt", tvec, pvec) * inv_det
        ok &= (u >= 0.0) & (u <= 1.0)
        qvec = np.cross(tvec, edge1)  # (T, 3)
        v = np.einsum("rk,tk->rt", d, qvec) * inv_det
        ok &= (v >= 0.0) & (u + v <= 1.0)
        t = np.einsum("tk,tk->t", edge2, qvec)[None, :] * inv_det
        ok &= t > 1e-9
        t = np.where(ok, t, np.inf)
        idx = np.argmin(t, axis=1)
        rows = np.arange(t.shape[0])
        best_t[start:start + chunk] = t[rows, idx]
        best_tri[start:start + chunk] = np.where(np.isfinite(t[rows, idx]), idx, -1)
    return best_t, best_tri


def raycast_sdm(
    model: CityModel,
    pose: SensorPose,
    cam: CameraIntrinsics = CameraIntrinsics(),
    max_range: float = DEFAULT_MAX_RANGE,
) -> SDM:
    """Render a semantic-depth map from the pose with one ray per pixel.

    Depth is the Euclidean distance to the nearest triangle hit; pixels with
    no hit or depth beyond max_range are masked out (zero semantics, zero
    depth sentinel).
    """
    classes = model.classes
    class_index = {label: i for i, label in enumerate(classes)}

    tris_list, tri_class = [], []
    for obj in model.objects:
        tris_list.append(obj.mesh)
        tri_class.extend([class_index[obj.class_label]] * len(obj.mesh))
    tris = np.concatenate(tris_list, axis=0) if tris_list else np.zeros((0, 3, 3))
    tri_class = np.asarray(tri_class, dtype=int)

    dirs = _camera_rays(pose, cam).reshape(-1, 3)
    origin = np.asarray(pose.position, dtype=float)
    t, tri_idx = _intersect_rays(origin, dirs, tris)

    depth = t.reshape(cam.height, cam.width)
    hit = tri_idx.reshape(cam.height, cam.width) >= 0
    mask = hit & (depth <= max_range)

    semantic = np.zeros((len(classes), cam.height, cam.width))
    if len(classes):
        channel = np.where(tri_idx >= 0, tri_class[np.clip(tri_idx, 0, None)], 0)
        channel = channel.reshape(cam.height, cam.width)
        rows, cols = np.nonzero(mask)
        semantic[channel[rows, cols], rows, cols] = 1.0

    depth = np.where(mask, depth, 0.0)
    return SDM(semantic=semantic, depth=depth, mask=mask, class_order=classes)


def _points_in_triangles_2d(points: np.ndarray, tris2d: np.ndarray) -> np.ndarray:
    """Inclusive point-in-triangle test. points (P, 2), tris2d (T, 3, 2) ->
    bool (P,), True if a point lies inside or on any triangle."""
    if len(tris2d) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool)
    a, b, c = tris2d[:, 0], tris2d[:, 1], tris2d[:, 2]

    def cross(o, d, p):
        return ((d[None, :, 0] - o[None, :, 0]) * (p[:, None, 1] - o[None, :, 1])
                - (d[None, :, 1] - o[None, :, 1]) * (p[:, None, 0] - o[None, :, 0]))

    eps = 1e-9
    s1 = cross(a, b, points)
    s2 = cross(b, c, points)
    s3 = cross(c, a, points)
    inside = ((s1 >= -eps) & (s2 >= -eps) & (s3 >= -eps)) | (
        (s1 <= eps) & (s2 <= eps) & (s3 <= eps)
    )
    return inside.any(axis=1)


def project_lanes_to_ra(
    model: CityModel,
    pose: SensorPose,
    map_axes: tuple[np.ndarray, np.ndarray],
    lane_classes: tuple[str, ...] = LANE_CLASSES,
) -> np.ndarray:
    """Occupancy grids of the lane-class ground footprints on the RA grid.

    Each RA bin center is mapped to ENU and tested against the 2D footprint
    of each lane class. Returns a (n_lane_classes, n_range, n_azimuth) 0/1
    array in lane_classes order.
    """
    range_axis, azimuth_axis = map_axes
    r = np.asarray(range_axis)[:, None] + pose.mount_offset
    angle = pose.heading + np.asarray(azimuth_axis)[None, :]
    east = pose.position[0] + r * np.cos(angle)
    north = pose.position[1] + r * np.sin(angle)
    points = np.stack([east.reshape(-1), north.reshape(-1)], axis=1)

    groups = group_by_semantics(model)
    grids = np.zeros((len(lane_classes), len(range_axis), len(azimuth_axis)))
    for k, label in enumerate(lane_classes):
        mesh = groups.get(label)
        if mesh is None:
            continue
        inside = _points_in_triangles_2d(points, mesh[:, :, :2])
        grids[k] = inside.reshape(len(range_axis), len(azimuth_axis)).astype(float)
    return grids
