"""Range-azimuth and range-Doppler maps from radar cubes, plus the
RA-bin <-> world-coordinate registration used for georeferenced overlays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .simulate import RadarCube
from .waveform import derive_radar_params


@dataclass
class RAMap:
    """Nonnegative intensity grid over (range bin, azimuth bin)."""

    grid: np.ndarray          # (n_range, n_azimuth), >= 0
    range_axis: np.ndarray    # m per range bin, strictly increasing
    azimuth_axis: np.ndarray  # rad per azimuth bin, strictly increasing
    frame_id: str = ""

    def __post_init__(self):
        if self.grid.shape != (len(self.range_axis), len(self.azimuth_axis)):
            raise ValueError(
              f"grid shape {self.grid.shape} does not match axes "
              f"({len(self.range_axis)}, {len(self.azimuth_axis)})"
            )
        if np.any(np.diff(self.range_axis) <= 0) or np.any(np.diff(self.azimuth_axis) <= 0):
            raise ValueError("axes must be strictly increasing")


@dataclass
class DopplerMap:
    """Nonnegative intensity grid over (range bin, Doppler-velocity bin)."""

    grid: np.ndarray           # (n_range, n_doppler), >= 0
    range_axis: np.ndarray     # m
    velocity_axis: np.ndarray  # m/s, strictly increasing, 0 at center bin


@dataclass(frozen=True)
class SensorPose:
    """Sensor deployment point and heading in ENU coordinates.

    heading is the boresight direction, radians CCW from +East. mount_offset
    shifts the map's range origin forward along each ray.
    """

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    heading: float = 0.0
    mount_offset: float = 0.1  # m

    def __post_init__(self):
        if self.mount_offset < 0:
            raise ValueError(f"mount_offset must be >= 0, got {self.mount_offset}")


def normalize(ra: RAMap) -> RAMap:
    """Min-max normalize the grid to [0, 1]; an all-zero grid stays zero."""
    peak = float(ra.grid.max()) if ra.grid.size else 0.0
    lo = float(ra.grid.min()) if ra.grid.size else 0.0
    if peak <= 0.0:
        grid = np.zeros_like(ra.grid)
    elif peak == lo:
        grid = np.ones_like(ra.grid)
    else:
        grid = (ra.grid - lo) / (peak - lo)
    return RAMap(grid=grid, range_axis=ra.range_axis, azimuth_axis=ra.azimuth_axis,
                 frame_id=ra.frame_id)


def azimuth_axis_for(n_azimuth_bins: int) -> np.ndarray:
    """arcsin of the FFT-shifted spatial-frequency bins of a lambda/2 array."""
    sin_az = 2.0 * np.fft.fftshift(np.fft.fftfreq(n_azimuth_bins))
    return np.arcsin(np.clip(sin_az, -1.0, 1.0))


def cube_to_ra_map(
    cube: RadarCube,
    n_range_bins: int,
    n_azimuth_bins: int,
    frame_id: str = "",
) -> RAMap:
    """FFT the cube into a range-azimuth intensity map.

    Hann window over fast time, zero-padded FFT over the antenna axis,
    magnitudes summed noncoherently over chirps. The azimuth axis is
    FFT-shifted so boresight sits at the center bin.
    """
    n_chirps, n_ant, n_samp = cube.data.shape
    if n_range_bins > n_samp:
        raise ValueError(f"n_range_bins {n_range_bins} > samples per chirp {n_samp}")
    if n_azimuth_bins < n_ant:
        raise ValueError(f"n_azimuth_bins {n_azimuth_bins} < virtual antennas {n_ant}")

    window = np.hanning(n_samp)
    spectrum = np.fft.fft(cube.data * window[None, None, :], axis=2)[:, :, :n_range_bins]
    beams = np.fft.fftshift(np.fft.fft(spectrum, n=n_azimuth_bins, axis=1), axes=1)
    grid = np.abs(beams).sum(axis=0).T  # (range, azimuth)

    params = derive_radar_params(cube.cfg)
    range_axis = np.arange(n_range_bins) * params.range_resolution
    return RAMap(grid=grid, range_axis=range_axis,
                 azimuth_axis=azimuth_axis_for(n_azimuth_bins), frame_id=frame_id)


def range_doppler_map(cube: RadarCube) -> DopplerMap:
    """FFT fast time then slow time; magnitudes summed over antennas.

    The velocity axis is the Doppler frequency scaled by lambda/2, shifted so
    zero velocity is the center bin.
    """
    n_chirps, _, n_samp = cube.data.shape
    if n_chirps < 2:
        raise ValueError("range-Doppler map needs at least 2 chirps")

    window = np.hanning(n_samp)
    spectrum = np.fft.fft(cube.data * window[None, None, :], axis=2)
    doppler = np.fft.fftshift(np.fft.fft(spectrum, axis=0), axes=0)
    grid = np.abs(doppler).sum(axis=1).T  # (range, doppler)

    params = derive_radar_params(cube.cfg)
    range_axis = np.arange(n_samp) * params.range_resolution
    velocity_axis = (
        np.fft.fftshift(np.fft.fftfreq(n_chirps))
        / cube.cfg.chirp_duration * params.wavelength / 2.0
    )
    return DopplerMap(grid=grid, range_axis=range_axis, velocity_axis=velocity_axis)


def ra_to_world(bin_idx: tuple[int, int], ra: RAMap, pose: SensorPose) -> np.ndarray:
    """Map a (range bin, azimuth bin) to an ENU ground-plane point (E, N)."""
    i, j = bin_idx
    if not (0 <= i < len(ra.range_axis) and 0 <= j < len(ra.azimuth_axis)):
        raise ValueError(f"bin {bin_idx} outside grid "
                         f"{(len(ra.range_axis), len(ra.azimuth_axis))}")
    r = ra.range_axis[i] + pose.mount_offset
    angle = pose.heading + ra.azimuth_axis[j]
    return np.array([
        pose.position[0] + r * math.cos(angle),
        pose.position[1] + r * math.sin(angle),
    ])


def world_to_ra(point, ra: RAMap, pose: SensorPose) -> tuple[int, int]:
    """Inverse of ra_to_world up to bin quantization (exact on bin centers)."""
    dx = float(point[0]) - pose.position[0]
    dy = float(point[1]) - pose.position[1]
    r = math.hypot(dx, dy) - pose.mount_offset
    az = math.remainder(math.atan2(dy, dx) - pose.heading, 2.0 * math.pi)
    i = int(np.argmin(np.abs(ra.range_axis - r)))
    j = int(np.argmin(np.abs(ra.azimuth_axis - az)))
    return i, j


def local_maxima(grid: np.ndarray) -> list[tuple[int, int]]:
    """Strict 3x3 local maxima; on plateaus only the first cell in row-major
    order counts, so results are deterministic."""
    h, w = grid.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = grid
    center = padded[1:-1, 1:-1]
    # neighbors before the center in row-major order must be strictly smaller,
    # the ones after it only non-greater
    before = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    after = [(0, 1), (1, -1), (1, 0), (1, 1)]
    mask = np.ones_like(center, dtype=bool)
    for di, dj in before:
        mask &= center > padded[1 + di:h + 1 + di, 1 + dj:w + 1 + dj]
    for di, dj in after:
        mask &= center >= padded[1 + di:h + 1 + di, 1 + dj:w + 1 + dj]
    ii, jj = np.nonzero(mask)
    return list(zip(ii.tolist(), jj.tolist()))


def track_peaks(
    maps: list[RAMap],
    max_step: float,
    pose: SensorPose = SensorPose(),
    floor: float = 0.5,
) -> list[list[tuple[int, np.ndarray]]]:
    """Track map peaks across frames into world-coordinate trajectories.

    Peaks are 3x3 local maxima at or above `floor` on the per-frame
    normalized grid. Frame-to-frame association is greedy nearest neighbor
    within max_step meters; unmatched peaks start new trajectories. Each
    trajectory is a list of (frame index, ENU point).
    """
    if len(maps) < 2:
        raise ValueError("tracking needs at least 2 maps")
    shape = maps[0].grid.shape
    for m in maps[1:]:
        if m.grid.shape != shape:
            raise ValueError("all maps must share axes")

    trajectories: list[list[tuple[int, np.ndarray]]] = []
    active: list[int] = []  # indices into trajectories
    for frame_idx, ra in enumerate(maps):
        norm = normalize(ra)
        peaks = [p for p in local_maxima(norm.grid) if norm.grid[p] >= floor]
        points = [ra_to_world(p, ra, pose) for p in peaks]

        pairs = []
        for ti, traj_idx in enumerate(active):
            last = trajectories[traj_idx][-1][1]
            for pi, point in enumerate(points):
                dist = float(np.linalg.norm(point - last))
                if dist <= max_step:
                    pairs.append((dist, ti, pi))
        pairs.sort(key=lambda t: t[0])

        used_traj, used_peak = set(), set()
        for dist, ti, pi in pairs:
            if ti in used_traj or pi in used_peak:
                continue
            used_traj.add(ti)
            used_peak.add(pi)
            trajectories[active[ti]].append((frame_idx, points[pi]))

        next_active = [active[ti] for ti in sorted(used_traj)]
        for pi, point in enumerate(points):
            if pi not in used_peak:
                trajectories.append([(frame_idx, point)])
                next_active.append(len(trajectories) - 1)
        active = next_active
    return trajectories
