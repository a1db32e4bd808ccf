"""Binary and text file formats (normative layout in docs/formats.md).

RDC1: radar cube, magic + u32 LE dims + interleaved f32 LE (re, im) pairs.
FMAP: float map stack, magic + u32 LE dims + f32 LE row-major data, with an
optional JSON sidecar for axes/metadata. PGM/PPM: 8-bit renders. JSON lines:
annotations and detections, angles stored in degrees.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np

from .citymodel import SDM
from .detect import GtAnnotation
from .postproc import Detection
from .ramap import RAMap
from .simulate import RadarCube
from .waveform import WaveformConfig

RDC1_MAGIC = b"RDC1"
FMAP_MAGIC = b"FMAP"

# fixed decimal precision for angle/der values in text formats, so that one
# write-read cycle is a projection and files round-trip byte-identically
_TEXT_DECIMALS = 12


class FormatError(ValueError):
    """Corrupt or mismatching binary/text artifact."""


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


# ---------------------------------------------------------------- RDC1

def write_rdc1(path, cube: RadarCube) -> None:
    data = np.ascontiguousarray(cube.data.astype(np.complex64))
    with open(path, "wb") as fh:
        fh.write(RDC1_MAGIC)
        fh.write(np.asarray(data.shape, dtype="<u4").tobytes())
        fh.write(data.view("<f4").tobytes())


def read_rdc1_raw(path) -> np.ndarray:
    """Read the complex cube array (chirps, antennas, samples)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != RDC1_MAGIC:
            raise FormatError(f"{path}: bad magic, expected RDC1")
        dims = np.frombuffer(_read_exact(fh, 12, "dims"), dtype="<u4")
        count = int(dims[0] * dims[1] * dims[2])
        payload = _read_exact(fh, count * 8, "samples")
        data = np.frombuffer(payload, dtype="<c8").reshape(tuple(int(d) for d in dims))
    return data


def read_rdc1(path, cfg: WaveformConfig) -> RadarCube:
    return RadarCube(data=read_rdc1_raw(path).astype(np.complex128), cfg=cfg)


# ---------------------------------------------------------------- FMAP

def write_fmap(path, array: np.ndarray, sidecar: dict | None = None) -> None:
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise FormatError(f"FMAP data must be (channels, rows, cols), got {array.shape}")
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(np.asarray(array.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    if sidecar is not None:
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1)
            fh.write("\n")


def read_fmap(path) -> tuple[np.ndarray, dict | None]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != FMAP_MAGIC:
            raise FormatError(f"{path}: bad magic, expected FMAP")
        dims = np.frombuffer(_read_exact(fh, 12, "dims"), dtype="<u4")
        count = int(dims[0] * dims[1] * dims[2])
        payload = _read_exact(fh, count * 4, "payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(tuple(int(d) for d in dims))
    sidecar = None
    sidecar_path = str(path) + ".json"
    if os.path.exists(sidecar_path):
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    return data.astype(float), sidecar


def save_ramap(path, ra: RAMap) -> None:
    write_fmap(path, ra.grid[None].astype(np.float32), sidecar={
        "kind": "ramap",
        "frame_id": ra.frame_id,
        "range_axis": [float(v) for v in ra.range_axis],
        "azimuth_axis": [float(v) for v in ra.azimuth_axis],
    })


def load_ramap(path) -> RAMap:
    data, sidecar = read_fmap(path)
    if sidecar is None or sidecar.get("kind") != "ramap":
        raise FormatError(f"{path}: missing or wrong sidecar for a range-azimuth map")
    return RAMap(
        grid=data[0],
        range_axis=np.asarray(sidecar["range_axis"]),
        azimuth_axis=np.asarray(sidecar["azimuth_axis"]),
        frame_id=sidecar.get("frame_id", ""),
    )


def save_sdm(path, sdm: SDM) -> None:
    stack = np.concatenate(
        [sdm.semantic, sdm.depth[None], sdm.mask.astype(np.float32)[None]], axis=0
    )
    write_fmap(path, stack.astype(np.float32), sidecar={
        "kind": "sdm",
        "class_order": list(sdm.class_order),
    })


def load_sdm(path) -> SDM:
    data, sidecar = read_fmap(path)
    if sidecar is None or sidecar.get("kind") != "sdm":
        raise FormatError(f"{path}: missing or wrong sidecar for a semantic-depth map")
    classes = list(sidecar["class_order"])
    return SDM(
        semantic=data[: len(classes)],
        depth=data[len(classes)],
        mask=data[len(classes) + 1] > 0.5,
        class_order=classes,
    )


# ---------------------------------------------------------------- PGM / PPM

def _to_u8(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array, dtype=float)
    peak = array.max() if array.size else 0.0
    if peak > 0:
        array = array / peak
    return np.clip(array * 255.0 + 0.5, 0, 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit binary PGM (P5); input is scaled by its max."""
    img = _to_u8(gray)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit binary PPM (P6); rgb is (H, W, 3), scaled by its max."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM input must be (H, W, 3), got {rgb.shape}")
    img = _to_u8(rgb)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def render_line_plot(
    series: dict[str, list[tuple[float, float]]],
    width: int = 480,
    height: int = 320,
) -> np.ndarray:
    """Minimal (H, W, 3) line plot for the sweep outputs: one polyline per
    series on a dark background with an axes box."""
    colors = [(255, 90, 90), (90, 200, 255), (120, 255, 120), (255, 220, 90)]
    img = np.zeros((height, width, 3), dtype=float)
    margin = 24
    img[margin, margin:width - margin] = 80
    img[height - margin, margin:width - margin] = 80
    img[margin:height - margin, margin] = 80
    img[margin:height - margin, width - margin] = 80

    points = [p for pts in series.values() for p in pts]
    if not points:
        return img
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(min(ys), 0.0), max(max(ys), 1e-9)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def to_px(x, y):
        col = margin + (x - x_lo) / x_span * (width - 2 * margin)
        row = height - margin - (y - y_lo) / y_span * (height - 2 * margin)
        return row, col

    for si, (_, pts) in enumerate(sorted(series.items())):
        color = colors[si % len(colors)]
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            r0, c0 = to_px(x0, y0)
            r1, c1 = to_px(x1, y1)
            steps = int(max(abs(r1 - r0), abs(c1 - c0), 1)) * 2
            for t in np.linspace(0.0, 1.0, steps):
                rr = int(round(r0 + (r1 - r0) * t))
                cc = int(round(c0 + (c1 - c0) * t))
                if 0 <= rr < height and 0 <= cc < width:
                    img[rr, cc] = color
    return img


# ---------------------------------------------------------------- weights

def save_mlp(directory, name: str, params) -> dict:
    """FMAP-wrapped weight tensors plus layer metadata for one MLP."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for k, (w, b) in enumerate(params.layers):
        w_file = f"{name}_l{k}_w.fmap"
        b_file = f"{name}_l{k}_b.fmap"
        write_fmap(directory / w_file, w[None].astype(np.float32))
        write_fmap(directory / b_file, b[None, None].astype(np.float32))
        layers.append({
            "weight": w_file, "bias": b_file,
            "shape": list(w.shape), "activation": params.activations[k],
        })
    return {"name": name, "layers": layers}


def load_mlp(directory, manifest_entry: dict):
    from .nn import MlpParams

    directory = Path(directory)
    layers, activations = [], []
    for layer in manifest_entry["layers"]:
        w, _ = read_fmap(directory / layer["weight"])
        b, _ = read_fmap(directory / layer["bias"])
        layers.append((w[0], b[0, 0]))
        activations.append(layer["activation"])
    return MlpParams(layers=layers, activations=activations)


def save_confmaps(path, confmaps, frame_id: str,
                  axes: tuple[np.ndarray, np.ndarray]) -> None:
    write_fmap(path, confmaps.grid.astype(np.float32), sidecar={
        "kind": "confmaps",
        "frame_id": frame_id,
        "class_order": list(confmaps.class_order),
        "range_axis": [float(v) for v in axes[0]],
        "azimuth_axis": [float(v) for v in axes[1]],
    })


def load_confmaps(path):
    from .detect import ConfMaps

    data, sidecar = read_fmap(path)
    if sidecar is None or sidecar.get("kind") != "confmaps":
        raise FormatError(f"{path}: missing or wrong sidecar for confidence maps")
    cm = ConfMaps(grid=data, class_order=tuple(sidecar["class_order"]))
    axes = (np.asarray(sidecar["range_axis"]), np.asarray(sidecar["azimuth_axis"]))
    return cm, sidecar.get("frame_id", ""), axes


def save_detector(directory, model) -> None:
    """Weights manifest + config snapshot for a trained detector."""
    from dataclasses import asdict

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "detector",
        "use_sdm": model.use_sdm,
        "out_shape": list(model.out_shape),
        "class_order": list(model.class_order),
        "config": asdict(model.config),
        "mlps": {
            "encoder": save_mlp(directory, "encoder", model.encoder),
            "to_spatial": save_mlp(directory, "to_spatial", model.to_spatial),
            "decoder": save_mlp(directory, "decoder", model.decoder),
        },
    }
    if model.sdm_params is not None:
        write_fmap(directory / "sdm_weight.fmap",
                   model.sdm_params.weight[None].astype(np.float32))
        manifest["sdm"] = {"weight": "sdm_weight.fmap",
                           "depth_scale": model.sdm_params.depth_scale}
    with open(directory / "model.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_detector(directory):
    from .detect import DetectConfig, DetectorModel, SdmFeatureParams

    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    if manifest.get("kind") != "detector":
        raise FormatError(f"{directory}: not a detector model directory")
    raw_cfg = manifest["config"]
    for key in ("feature_shape", "pool_shape"):
        raw_cfg[key] = tuple(raw_cfg[key])
    sdm_params = None
    if "sdm" in manifest:
        weight, _ = read_fmap(directory / manifest["sdm"]["weight"])
        sdm_params = SdmFeatureParams(weight=weight[0],
                                      depth_scale=manifest["sdm"]["depth_scale"])
    return DetectorModel(
        encoder=load_mlp(directory, manifest["mlps"]["encoder"]),
        to_spatial=load_mlp(directory, manifest["mlps"]["to_spatial"]),
        decoder=load_mlp(directory, manifest["mlps"]["decoder"]),
        sdm_params=sdm_params,
        use_sdm=manifest["use_sdm"],
        config=DetectConfig(**raw_cfg),
        out_shape=tuple(manifest["out_shape"]),
        class_order=tuple(manifest["class_order"]),
    )


def save_pretext(directory, result) -> None:
    from dataclasses import asdict

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "pretext",
        "history": result.history,
        "config": asdict(result.config),
        "mlps": {
            "radar_encoder": save_mlp(directory, "radar_encoder", result.radar_encoder),
            "projection": save_mlp(directory, "projection", result.projection),
            "momentum_encoder": save_mlp(directory, "momentum_encoder",
                                         result.momentum_encoder),
            "momentum_projection": save_mlp(directory, "momentum_projection",
                                            result.momentum_projection),
        },
    }
    with open(directory / "pretext.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_pretext(directory):
    from .nn import PretextResult, SslConfig

    directory = Path(directory)
    manifest = json.loads((directory / "pretext.json").read_text(encoding="utf-8"))
    if manifest.get("kind") != "pretext":
        raise FormatError(f"{directory}: not a pretext result directory")
    raw_cfg = manifest["config"]
    raw_cfg["pool_shape"] = tuple(raw_cfg["pool_shape"])
    mlps = manifest["mlps"]
    return PretextResult(
        radar_encoder=load_mlp(directory, mlps["radar_encoder"]),
        projection=load_mlp(directory, mlps["projection"]),
        history=list(manifest["history"]),
        momentum_encoder=load_mlp(directory, mlps["momentum_encoder"]),
        momentum_projection=load_mlp(directory, mlps["momentum_projection"]),
        config=SslConfig(**raw_cfg),
    )


# ---------------------------------------------------------------- JSON lines

def _round(value: float) -> float:
    return round(float(value), _TEXT_DECIMALS)


def write_annotations(path, annotations: list[GtAnnotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps({
                "frame": ann.frame_id,
                "class": ann.class_label,
                "range_m": _round(ann.range_m),
                "azimuth_deg": _round(math.degrees(ann.azimuth_rad)),
            }) + "\n")


def read_annotations(path) -> list[GtAnnotation]:
    out = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{line_no}: bad JSON line: {exc.msg}") from exc
        out.append(GtAnnotation(
            frame_id=str(raw["frame"]),
            class_label=raw["class"],
            range_m=float(raw["range_m"]),
            azimuth_rad=math.radians(float(raw["azimuth_deg"])),
        ))
    return out


def write_detections(path, detections: list[tuple[str, Detection]]) -> None:
    """detections: (frame_id, Detection) pairs."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame_id, det in detections:
            fh.write(json.dumps({
                "frame": frame_id,
                "class": det.class_label,
                "range_m": _round(det.range_m),
                "azimuth_deg": _round(math.degrees(det.azimuth_rad)),
                "conf": _round(det.confidence),
            }) + "\n")


def read_detections(path) -> list[tuple[str, Detection]]:
    out = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{line_no}: bad JSON line: {exc.msg}") from exc
        out.append((str(raw["frame"]), Detection(
            class_label=raw["class"],
            range_m=float(raw["range_m"]),
            azimuth_rad=math.radians(float(raw["azimuth_deg"])),
            confidence=float(raw["conf"]),
            bin=tuple(raw.get("bin", (0, 0))),
        )))
    return out
