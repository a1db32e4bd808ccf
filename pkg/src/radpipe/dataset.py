"""Scenario and dataset generation: targets placed on (or off) the city
model's lanes, simulated into radar cubes, RA maps, semantic-depth maps,
image-proxy renders, and JSON-lines ground truth under one manifest."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .citymodel import (
    SDM,
    CameraIntrinsics,
    CityModel,
    group_by_semantics,
    parse_city_model,
)
from .detect import DetectConfig, GtAnnotation, KappaTable
from .nn import SslConfig
from .ramap import RAMap, SensorPose, cube_to_ra_map, normalize
from .simulate import (
    FOV_HALF_ANGLE_DEG,
    PointTarget,
    ReflectorLine,
    inject_ghost,
    simulate_frame,
)
from .waveform import WaveformConfig, derive_radar_params


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage sub-seed derived from the experiment seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ClassSpec:
    """Per-class target generation parameters."""

    count: tuple[int, int] = (0, 2)          # inclusive range per frame
    speed: tuple[float, float] = (0.5, 2.0)  # m/s magnitude
    amplitude: tuple[float, float] = (0.2, 0.5)
    lane: str = "sidewalk"                   # lane class this object belongs on


DEFAULT_CLASSES = {
    "pedestrian": ClassSpec((0, 2), (0.5, 2.0), (0.20, 0.45), "sidewalk"),
    "cyclist": ClassSpec((0, 2), (2.0, 8.0), (0.35, 0.70), "bicycle_lane"),
    "car": ClassSpec((1, 2), (3.0, 14.0), (0.60, 1.20), "driving_lane"),
}


@dataclass
class SceneConfig:
    city_model: str                     # path to a gml_lite/json document
    poses: list[SensorPose]
    reflectors: list[ReflectorLine | None] = field(default_factory=list)
    ghost_attenuation: float = 0.45


@dataclass
class ExperimentConfig:
    """Everything needed to generate a dataset and run the full pipeline."""

    waveform: WaveformConfig
    scene: SceneConfig
    n_range_bins: int = 64
    n_azimuth_bins: int = 64
    n_frames: int = 400
    classes: dict[str, ClassSpec] = field(default_factory=lambda: dict(DEFAULT_CLASSES))
    on_lane_fraction: float = 0.9
    snr_db: float | None = 18.0
    min_target_range: float = 1.0
    max_target_range_fraction: float = 0.9
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    sdm_max_range: float = 35.0
    kappa: KappaTable = field(default_factory=KappaTable)
    sigma_scale: float = 2.0
    peak_threshold: float = 0.3
    ols_threshold: float = 0.8
    train_fraction: float = 0.8
    ssl: SslConfig = field(default_factory=SslConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.on_lane_fraction <= 1.0:
            raise ValueError("on_lane_fraction must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not self.scene.poses:
            raise ValueError("scene needs at least one pose")


def _pose_from_dict(raw: dict) -> SensorPose:
    return SensorPose(
        position=tuple(raw.get("position", (0.0, 0.0, 0.0))),
        heading=math.radians(raw.get("heading_deg", 0.0)),
        mount_offset=raw.get("mount_offset", 0.1),
    )


def _pose_to_dict(pose: SensorPose) -> dict:
    return {
        "position": list(pose.position),
        "heading_deg": math.degrees(pose.heading),
        "mount_offset": pose.mount_offset,
    }


def load_experiment_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from JSON; relative paths resolve against the
    config file's directory."""
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))

    scene_raw = raw["scene"]
    city = Path(scene_raw["city_model"])
    if not city.is_absolute():
        city = path.parent / city
    reflectors = []
    for entry in scene_raw.get("reflectors", []):
        if entry is None:
            reflectors.append(None)
        else:
            reflectors.append(ReflectorLine(
                point=tuple(entry["point"]), direction=tuple(entry["direction"])
            ))
    scene = SceneConfig(
        city_model=str(city),
        poses=[_pose_from_dict(p) for p in scene_raw["poses"]],
        reflectors=reflectors,
        ghost_attenuation=scene_raw.get("ghost_attenuation", 0.45),
    )

    classes = {}
    for label, spec in raw.get("classes", {}).items():
        classes[label] = ClassSpec(
            count=tuple(spec["count"]), speed=tuple(spec["speed"]),
            amplitude=tuple(spec["amplitude"]), lane=spec["lane"],
        )

    kwargs = dict(
        waveform=WaveformConfig(**raw["waveform"]),
        scene=scene,
        ssl=SslConfig(**{**raw.get("ssl", {}),
                         **({"pool_shape": tuple(raw["ssl"]["pool_shape"])}
                            if "pool_shape" in raw.get("ssl", {}) else {})}),
        detect=_detect_from_dict(raw.get("detect", {})),
        camera=CameraIntrinsics(**raw.get("camera", {})),
        kappa=KappaTable(kappa=raw["kappa"]) if "kappa" in raw else KappaTable(),
    )
    if classes:
        kwargs["classes"] = classes
    for name in ("n_range_bins", "n_azimuth_bins", "n_frames", "on_lane_fraction",
                 "snr_db", "min_target_range", "max_target_range_fraction",
                 "sdm_max_range", "sigma_scale", "peak_threshold", "ols_threshold",
                 "train_fraction", "seed"):
        if name in raw:
            kwargs[name] = raw[name]
    return ExperimentConfig(**kwargs)


def _detect_from_dict(raw: dict) -> DetectConfig:
    raw = dict(raw)
    for key in ("feature_shape", "pool_shape"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return DetectConfig(**raw)


# ------------------------------------------------------------- demo scene

DEMO_CITY = {
    # class -> list of axis-aligned patches; ground patches are (x0,x1,y0,y1),
    # walls are (x0,x1,y,z0,z1)
    "driving_lane": [(-40.0, 40.0, 3.0, 9.0)],
    "bicycle_lane": [(-40.0, 40.0, 9.5, 11.0)],
    "sidewalk": [(-40.0, 40.0, 11.5, 14.0)],
}
DEMO_WALL = (-40.0, 40.0, 15.0, 0.0, 8.0)  # building facade along the street
DEMO_TREES = [(-6.0, 14.4), (7.0, 14.4)]


def make_demo_city() -> CityModel:
    """Small street scene: three lane strips, a building facade, two trees."""
    from .citymodel import SemanticObject

    objects = []
    for label, patches in DEMO_CITY.items():
        for k, (x0, x1, y0, y1) in enumerate(patches):
            tris = np.array([
                [[x0, y0, 0.0], [x1, y0, 0.0], [x1, y1, 0.0]],
                [[x0, y0, 0.0], [x1, y1, 0.0], [x0, y1, 0.0]],
            ])
            objects.append(SemanticObject(
                id=f"{label}-{k}", class_label=label, lod=0, mesh=tris,
                attributes={"surface": "ground"},
            ))
    x0, x1, y, z0, z1 = DEMO_WALL
    wall = np.array([
        [[x0, y, z0], [x1, y, z0], [x1, y, z1]],
        [[x0, y, z0], [x1, y, z1], [x0, y, z1]],
    ])
    objects.append(SemanticObject(
        id="building-0", class_label="building", lod=2, mesh=wall,
        attributes={"function": "office"},
    ))
    for k, (tx, ty) in enumerate(DEMO_TREES):
        trunk = np.array([
            [[tx - 0.4, ty, 0.0], [tx + 0.4, ty, 0.0], [tx + 0.4, ty, 3.0]],
            [[tx - 0.4, ty, 0.0], [tx + 0.4, ty, 3.0], [tx - 0.4, ty, 3.0]],
        ])
        objects.append(SemanticObject(
            id=f"tree-{k}", class_label="tree", lod=1, mesh=trunk, attributes={},
        ))
    return CityModel(objects=objects)


def demo_poses() -> list[SensorPose]:
    return [
        SensorPose(position=(0.0, 0.0, 1.2), heading=math.radians(90.0)),
        SensorPose(position=(-12.0, -2.0, 1.2), heading=math.radians(75.0)),
        SensorPose(position=(12.0, -2.0, 1.2), heading=math.radians(105.0)),
        SensorPose(position=(0.0, -6.0, 1.2), heading=math.radians(90.0)),
    ]


def demo_reflector() -> ReflectorLine:
    x0, x1, y, _, _ = DEMO_WALL
    return ReflectorLine(point=(x0, y), direction=(1.0, 0.0))


DESK_WAVEFORM = WaveformConfig(
    carrier_freq=77e9,
    chirp_bandwidth=300e6,   # 0.5 m range bins, 32 m unambiguous at 64 samples
    n_chirps_per_frame=16,
    n_tx=2,
    n_rx=4,
    samples_per_chirp=64,
    chirp_duration=60e-6,
    frame_rate=15.0,
)


def write_demo_scene(directory) -> tuple[Path, Path]:
    """Write the demo city model and a matching experiment config; returns
    (city path, config path)."""
    from .citymodel import city_model_to_gml

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    city_path = directory / "city_demo.gml"
    city_path.write_bytes(city_model_to_gml(make_demo_city()))

    config = {
        "seed": 0,
        "waveform": {
            "carrier_freq": DESK_WAVEFORM.carrier_freq,
            "chirp_bandwidth": DESK_WAVEFORM.chirp_bandwidth,
            "n_chirps_per_frame": DESK_WAVEFORM.n_chirps_per_frame,
            "n_tx": DESK_WAVEFORM.n_tx,
            "n_rx": DESK_WAVEFORM.n_rx,
            "samples_per_chirp": DESK_WAVEFORM.samples_per_chirp,
            "chirp_duration": DESK_WAVEFORM.chirp_duration,
            "frame_rate": DESK_WAVEFORM.frame_rate,
        },
        "scene": {
            "city_model": "city_demo.gml",
            "poses": [_pose_to_dict(p) for p in demo_poses()],
            "reflectors": [
                {"point": list(demo_reflector().point),
                 "direction": list(demo_reflector().direction)}
            ] * len(demo_poses()),
            "ghost_attenuation": 0.45,
        },
        "n_range_bins": 64,
        "n_azimuth_bins": 64,
        "n_frames": 400,
        "on_lane_fraction": 0.9,
        "snr_db": 18.0,
        "classes": {
            label: {"count": list(spec.count), "speed": list(spec.speed),
                    "amplitude": list(spec.amplitude), "lane": spec.lane}
            for label, spec in DEFAULT_CLASSES.items()
        },
        "camera": {"width": 64, "height": 48,
                   "horizontal_fov": 120.0, "vertical_fov": 90.0},
        "sdm_max_range": 35.0,
        "kappa": {"pedestrian": 0.08, "cyclist": 0.10, "car": 0.12},
        "sigma_scale": 2.0,
        "peak_threshold": 0.3,
        "ols_threshold": 0.8,
        "train_fraction": 0.8,
        "ssl": {"epochs": 20, "batch_size": 16, "queue_capacity": 512},
        "detect": {"epochs": 30, "batch_size": 8, "learning_rate": 1e-3},
    }
    config_path = directory / "desk.json"
    config_path.write_text(json.dumps(config, indent=1) + "\n", encoding="utf-8")
    return city_path, config_path


# ------------------------------------------------------------- placement

def world_to_sensor_polar(point, pose: SensorPose) -> tuple[float, float]:
    """ENU ground point -> (range, azimuth) seen by the sensor (the inverse
    of the RA registration, including the mount offset)."""
    dx = float(point[0]) - pose.position[0]
    dy = float(point[1]) - pose.position[1]
    r = math.hypot(dx, dy) - pose.mount_offset
    az = math.remainder(math.atan2(dy, dx) - pose.heading, 2.0 * math.pi)
    return r, az


def sensor_polar_to_world(range_m: float, azimuth_rad: float, pose: SensorPose
                          ) -> np.ndarray:
    angle = pose.heading + azimuth_rad
    r = range_m + pose.mount_offset
    return np.array([
        pose.position[0] + r * math.cos(angle),
        pose.position[1] + r * math.sin(angle),
    ])


def _sample_on_mesh(mesh: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform point on a triangle soup (area-weighted, ground plane)."""
    areas = 0.5 * np.abs(np.cross(
        mesh[:, 1, :2] - mesh[:, 0, :2], mesh[:, 2, :2] - mesh[:, 0, :2]
    ))
    tri = mesh[rng.choice(len(mesh), p=areas / areas.sum())]
    u, v = rng.random(), rng.random()
    if u + v > 1.0:
        u, v = 1.0 - u, 1.0 - v
    p = tri[0] + u * (tri[1] - tri[0]) + v * (tri[2] - tri[0])
    return p[:2]


class PlacementError(RuntimeError):
    """No valid spot found for a requested target."""


def sample_targets(
    cfg: ExperimentConfig,
    lane_meshes: dict[str, np.ndarray],
    pose: SensorPose,
    rng: np.random.Generator,
) -> list[PointTarget]:
    """Draw one frame's targets; each is on its class lane with probability
    on_lane_fraction, elsewhere in the field of view otherwise."""
    params = derive_radar_params(cfg.waveform)
    r_lo = cfg.min_target_range
    r_hi = cfg.max_target_range_fraction * params.unambiguous_range
    az_max = math.radians(FOV_HALF_ANGLE_DEG - 5.0)

    targets = []
    for label, spec in sorted(cfg.classes.items()):
        n = int(rng.integers(spec.count[0], spec.count[1] + 1))
        for _ in range(n):
            on_lane = rng.random() < cfg.on_lane_fraction
            if on_lane:
                mesh = lane_meshes.get(spec.lane)
                if mesh is None:
                    raise PlacementError(
                        f"no {spec.lane!r} geometry in the city model for "
                        f"on-lane {label} placement"
                    )
                for attempt in range(200):
                    point = _sample_on_mesh(mesh, rng)
                    r, az = world_to_sensor_polar(point, pose)
                    if r_lo <= r <= r_hi and abs(az) <= az_max:
                        break
                else:
                    raise PlacementError(
                        f"could not place {label} on {spec.lane!r} within the "
                        "field of view"
                    )
            else:
                from .citymodel import _points_in_triangles_2d

                mesh = lane_meshes.get(spec.lane)
                for attempt in range(20):
                    r = rng.uniform(r_lo, r_hi)
                    az = rng.uniform(-az_max, az_max)
                    point = sensor_polar_to_world(r, az, pose)
                    if mesh is None or not _points_in_triangles_2d(
                        point[None, :], mesh[:, :, :2]
                    )[0]:
                        break
            targets.append(PointTarget(
                range_m=r,
                azimuth_rad=az,
                radial_velocity=float(rng.uniform(*spec.speed) * rng.choice([-1, 1])),
                amplitude=float(rng.uniform(*spec.amplitude)),
                class_label=label,
            ))
    return targets


# ------------------------------------------------------------- proxy render

CLASS_VISUAL_SIZE = {"pedestrian": 0.5, "cyclist": 0.8, "car": 1.6}  # m


def render_scene_view(
    sdm: SDM,
    pose: SensorPose,
    cam: CameraIntrinsics,
    targets: list[PointTarget],
    rng: np.random.Generator,
    noise_sigma: float = 0.02,
) -> np.ndarray:
    """Camera-like grayscale stand-in: the raycast scene as background with
    one bright blob per (real) target, plus mild pixel noise."""
    h, w = cam.height, cam.width
    n_cls = sdm.semantic.shape[0]
    weights = (np.arange(n_cls) + 1.0) / (n_cls + 1.0)
    img = 0.25 * np.einsum("c,chw->hw", weights, sdm.semantic)
    img += 0.20 * np.where(sdm.mask, 1.0 - sdm.depth / max(sdm.depth.max(), 1.0), 0.0)

    fx = (w / 2.0) / math.tan(math.radians(cam.horizontal_fov) / 2.0)
    fy = (h / 2.0) / math.tan(math.radians(cam.vertical_fov) / 2.0)
    heading = pose.heading
    forward = np.array([math.cos(heading), math.sin(heading), 0.0])
    right = np.array([math.sin(heading), -math.cos(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for t in targets:
        if t.is_ghost:
            continue  # a camera does not see multipath ghosts
        ground = sensor_polar_to_world(t.range_m, t.azimuth_rad, pose)
        p3 = np.array([ground[0], ground[1], 0.9])  # nominal object height
        rel = p3 - np.asarray(pose.position)
        depth = rel @ forward
        if depth <= 0.1:
            continue
        u = w // 2 + (rel @ right) / depth * fx
        v = h // 2 - (rel @ up) / depth * fy
        size_px = max(fx * CLASS_VISUAL_SIZE.get(t.class_label, 0.8) / depth, 0.6)
        blob = np.exp(-((rows - v) ** 2 + (cols - u) ** 2) / (2.0 * size_px**2))
        img += t.amplitude * blob

    img += noise_sigma * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, None)
    peak = img.max()
    return img / peak if peak > 0 else img


# ------------------------------------------------------------- generation

def gen_dataset(cfg: ExperimentConfig, out_dir) -> Path:
    """Generate the full dataset tree under out_dir and return its path.

    Layout: cubes/*.rdc, ramaps/*.fmap, proxies/*.fmap, sdm/pose_*.fmap,
    annotations.jsonl, manifest.json. Deterministic for a fixed cfg.seed.
    """
    out = Path(out_dir)
    if not os.path.exists(cfg.scene.city_model):
        raise FileNotFoundError(f"city model not found: {cfg.scene.city_model}")
    for sub in ("cubes", "ramaps", "proxies", "sdm"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    document = Path(cfg.scene.city_model).read_bytes()
    fmt = "json" if cfg.scene.city_model.endswith(".json") else "gml_lite"
    model = parse_city_model(document, fmt)
    lane_meshes = group_by_semantics(model)

    from .citymodel import raycast_sdm

    sdm_files = []
    sdms = []
    for k, pose in enumerate(cfg.scene.poses):
        sdm = raycast_sdm(model, pose, cfg.camera, cfg.sdm_max_range)
        name = f"sdm/pose_{k:03d}.fmap"
        formats.save_sdm(out / name, sdm)
        sdm_files.append(name)
        sdms.append(sdm)

    reflectors = cfg.scene.reflectors or [None] * len(cfg.scene.poses)
    params = derive_radar_params(cfg.waveform)

    rng = np.random.default_rng(stage_seed(cfg.seed, "gen"))
    annotations: list[GtAnnotation] = []
    frames = []
    for f in range(cfg.n_frames):
        frame_id = f"{f:05d}"
        pose_idx = f % len(cfg.scene.poses)
        pose = cfg.scene.poses[pose_idx]

        targets = sample_targets(cfg, lane_meshes, pose, rng)
        with_ghosts = targets
        reflector = reflectors[pose_idx] if pose_idx < len(reflectors) else None
        if reflector is not None:
            with_ghosts = inject_ghost(
                targets, reflector, cfg.scene.ghost_attenuation,
                max_range=params.unambiguous_range,
            )

        cube = simulate_frame(with_ghosts, cfg.waveform, cfg.snr_db,
                              seed=stage_seed(cfg.seed, f"frame:{f}"))
        ra = cube_to_ra_map(cube, cfg.n_range_bins, cfg.n_azimuth_bins, frame_id)

        proxy = render_scene_view(
            sdms[pose_idx], pose, cfg.camera, with_ghosts,
            np.random.default_rng(stage_seed(cfg.seed, f"proxy:{f}")),
        )

        cube_name = f"cubes/{frame_id}.rdc"
        ramap_name = f"ramaps/{frame_id}.fmap"
        proxy_name = f"proxies/{frame_id}.fmap"
        formats.write_rdc1(out / cube_name, cube)
        formats.save_ramap(out / ramap_name, normalize(ra))
        formats.write_fmap(out / proxy_name, proxy[None].astype(np.float32),
                           sidecar={"kind": "proxy", "frame_id": frame_id})

        for t in targets:  # ghosts are deliberately not annotated
            annotations.append(GtAnnotation(
                frame_id=frame_id, class_label=t.class_label,
                range_m=t.range_m, azimuth_rad=t.azimuth_rad,
            ))
        frames.append({
            "id": frame_id, "cube": cube_name, "ramap": ramap_name,
            "proxy": proxy_name, "pose_index": pose_idx,
        })

    formats.write_annotations(out / "annotations.jsonl", annotations)
    manifest = {
        "n_frames": cfg.n_frames,
        "frames": frames,
        "sdm_files": sdm_files,
        "poses": [_pose_to_dict(p) for p in cfg.scene.poses],
        "classes": sorted(cfg.classes),
        "waveform": json.loads(cfg.waveform.to_json()),
        "n_range_bins": cfg.n_range_bins,
        "n_azimuth_bins": cfg.n_azimuth_bins,
        "seed": cfg.seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n",
                                       encoding="utf-8")
    return out


@dataclass
class FrameRecord:
    frame_id: str
    ra: RAMap
    proxy: np.ndarray
    sdm: SDM
    pose: SensorPose
    annotations: list[GtAnnotation]


def load_dataset(directory) -> list[FrameRecord]:
    """Load every frame of a generated dataset into memory (desk scale)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    sdms = [formats.load_sdm(directory / name) for name in manifest["sdm_files"]]
    poses = [_pose_from_dict(p) for p in manifest["poses"]]
    by_frame: dict[str, list[GtAnnotation]] = {}
    for ann in formats.read_annotations(directory / "annotations.jsonl"):
        by_frame.setdefault(ann.frame_id, []).append(ann)

    records = []
    for entry in manifest["frames"]:
        ra = formats.load_ramap(directory / entry["ramap"])
        proxy, _ = formats.read_fmap(directory / entry["proxy"])
        records.append(FrameRecord(
            frame_id=entry["id"],
            ra=ra,
            proxy=proxy[0],
            sdm=sdms[entry["pose_index"]],
            pose=poses[entry["pose_index"]],
            annotations=by_frame.get(entry["id"], []),
        ))
    return records
