"""Synthetic dechirped FMCW baseband simulator for point-target scenes.

Produces complex radar cubes (chirp x virtual antenna x fast-time sample)
for lists of point targets, with optional white Gaussian noise and
mirror-image ghost targets from a planar reflector in the ground plane.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .waveform import SPEED_OF_LIGHT, WaveformConfig, derive_radar_params

log = logging.getLogger(__name__)

CLASS_LABELS = ("pedestrian", "cyclist", "car")
FOV_HALF_ANGLE_DEG = 60.0  # sensor field of view is +/- 60 degrees


@dataclass(frozen=True)
class PointTarget:
    """Ideal point scatterer in sensor polar coordinates.

    azimuth_rad is 0 at boresight, positive to the left; amplitude is a
    linear gain (1.0 = reference target for SNR accounting).
    """

    range_m: float
    azimuth_rad: float
    radial_velocity: float = 0.0  # m/s, positive receding
    amplitude: float = 1.0
    class_label: str = "car"
    is_ghost: bool = False

    def __post_init__(self):
        if self.class_label not in CLASS_LABELS:
            raise ValueError(
                f"unknown class {self.class_label!r}, expected one of {CLASS_LABELS}"
            )
        if not self.amplitude > 0:
            raise ValueError(f"amplitude must be > 0, got {self.amplitude}")


@dataclass
class RadarCube:
    """Complex baseband samples, shape (n_chirps, n_virtual, samples_per_chirp)."""

    data: np.ndarray
    cfg: WaveformConfig

    def __post_init__(self):
        params = derive_radar_params(self.cfg)
        expected = (
            self.cfg.n_chirps_per_frame,
            params.n_virtual,
            self.cfg.samples_per_chirp,
        )
        if self.data.shape != expected:
            raise ValueError(f"cube shape {self.data.shape} != {expected} from config")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite samples")


def validate_target(target: PointTarget, cfg: WaveformConfig) -> None:
    """Reject targets outside the field of view or the unambiguous range."""
    params = derive_radar_params(cfg)
    if not 0.0 < target.range_m <= params.unambiguous_range:
        raise ValueError(
            f"target out of range: range={target.range_m:.3f} m not in "
            f"(0, {params.unambiguous_range:.3f}] ({target!r})"
        )
    if abs(math.degrees(target.azimuth_rad)) > FOV_HALF_ANGLE_DEG + 1e-9:
        raise ValueError(
            f"target outside field of view: azimuth="
            f"{math.degrees(target.azimuth_rad):.2f} deg ({target!r})"
        )


def simulate_frame(
    targets: list[PointTarget],
    cfg: WaveformConfig,
    snr_db: float | None = None,
    seed: int = 0,
) -> RadarCube:
    """Simulate one dechirped frame as a coherent sum of point-target beats.

    Per target: beat frequency f_b = 2 B r / (c T_c) over fast time, Doppler
    f_d = 2 v / lambda over chirps, and a half-wavelength array phase
    0.5 sin(azimuth) per virtual antenna. If snr_db is given, complex white
    Gaussian noise is added so a unit-amplitude target has that SNR per
    sample. Deterministic for a fixed seed.
    """
    for target in targets:
        validate_target(target, cfg)

    params = derive_radar_params(cfg)
    n_chirps = cfg.n_chirps_per_frame
    n_ant = params.n_virtual
    n_samp = cfg.samples_per_chirp

    chirp_idx = np.arange(n_chirps)[:, None, None]
    ant_idx = np.arange(n_ant)[None, :, None]
    t_fast = (np.arange(n_samp) / n_samp * cfg.chirp_duration)[None, None, :]

    data = np.zeros((n_chirps, n_ant, n_samp), dtype=np.complex128)
    for target in targets:
        f_beat = 2.0 * cfg.chirp_bandwidth * target.range_m / (
            SPEED_OF_LIGHT * cfg.chirp_duration
        )
        f_doppler = 2.0 * target.radial_velocity / params.wavelength
        phase = 2.0 * np.pi * (
            f_beat * t_fast
            + f_doppler * cfg.chirp_duration * chirp_idx
            + 0.5 * math.sin(target.azimuth_rad) * ant_idx
        )
        data += target.amplitude * np.exp(1j * phase)

    if snr_db is not None:
        rng = np.random.default_rng(seed)
        noise_power = 10.0 ** (-snr_db / 10.0)  # unit reference amplitude
        sigma = math.sqrt(noise_power / 2.0)
        data += sigma * (
            rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)
        )

    return RadarCube(data=data, cfg=cfg)


@dataclass(frozen=True)
class ReflectorLine:
    """Infinite reflector line in the ground plane (point + direction, ENU meters)."""

    point: tuple[float, float]
    direction: tuple[float, float]

    def __post_init__(self):
        if math.hypot(*self.direction) < 1e-12:
            raise ValueError("reflector direction must have non-zero length")


def _reflect_point(p: np.ndarray, line: ReflectorLine) -> np.ndarray:
    a = np.asarray(line.point, dtype=float)
    d = np.asarray(line.direction, dtype=float)
    d = d / np.linalg.norm(d)
    rel = p - a
    return a + 2.0 * d * (rel @ d) - rel


def inject_ghost(
    targets: list[PointTarget],
    reflector_plane: ReflectorLine,
    attenuation: float = 0.5,
    max_range: float | None = None,
) -> list[PointTarget]:
    """Add one mirror-image ghost per target, reflected across the line.

    Ghost amplitude is scaled by `attenuation`. Mirror images outside the
    field of view, or beyond max_range when given, are dropped. A target
    sitting on the reflector produces a coincident ghost, which is kept
    (and logged).
    """
    if not attenuation > 0:
        raise ValueError(f"attenuation must be > 0, got {attenuation}")

    out = list(targets)
    for target in targets:
        pos = np.array([
            target.range_m * math.cos(target.azimuth_rad),
            target.range_m * math.sin(target.azimuth_rad),
        ])
        mirrored = _reflect_point(pos, reflector_plane)
        r = float(np.linalg.norm(mirrored))
        az = float(math.atan2(mirrored[1], mirrored[0]))
        if np.allclose(mirrored, pos, atol=1e-9):
            log.warning("ghost coincides with its source target at r=%.3f m", r)
        if abs(math.degrees(az)) > FOV_HALF_ANGLE_DEG:
            continue
        if r <= 0.0 or (max_range is not None and r > max_range):
            continue
        out.append(
            replace(
                target,
                range_m=r,
                azimuth_rad=az,
                amplitude=target.amplitude * attenuation,
                is_ghost=True,
            )
        )
    return out
