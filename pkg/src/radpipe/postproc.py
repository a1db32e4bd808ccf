"""Confidence maps to target lists: peak finding plus location-based NMS.

Peaks are strict 3x3 local maxima above a confidence threshold; pairs of
same-class peaks whose location similarity exceeds the suppression threshold
are assumed to be the same object and the lower-confidence one is dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detect import ConfMaps, KappaTable
from .ramap import local_maxima

DEFAULT_PEAK_THRESHOLD = 0.3
DEFAULT_OLS_THRESHOLD = 0.8


@dataclass(frozen=True)
class Detection:
    class_label: str
    range_m: float
    azimuth_rad: float
    confidence: float
    bin: tuple[int, int]

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def polar_to_cart(range_m: float, azimuth_rad: float) -> tuple[float, float]:
    return range_m * math.cos(azimuth_rad), range_m * math.sin(azimuth_rad)


def cart_distance(r1: float, az1: float, r2: float, az2: float) -> float:
    x1, y1 = polar_to_cart(r1, az1)
    x2, y2 = polar_to_cart(r2, az2)
    return math.hypot(x1 - x2, y1 - y2)


def ols(d: float, s: float, kappa_cls: float) -> float:
    """Location similarity of two detections: exp(-d^2 / (2 (s kappa)^2)).

    d is their Cartesian distance in meters, s the reference detection's
    distance to the device, kappa_cls the per-class error tolerance.
    """
    if s <= 0.0:
        raise ValueError(f"s must be > 0, got {s}")
    if kappa_cls <= 0.0:
        raise ValueError(f"kappa_cls must be > 0, got {kappa_cls}")
    if d < 0.0:
        raise ValueError(f"d must be >= 0, got {d}")
    return math.exp(-(d**2) / (2.0 * (s * kappa_cls) ** 2))


def l_nms(
    confmaps: ConfMaps,
    peak_threshold: float,
    ols_threshold: float,
    kappa: KappaTable,
    axes: tuple[np.ndarray, np.ndarray],
) -> list[Detection]:
    """Location-based non-maximum suppression over per-class peak lists.

    Peaks are visited in descending confidence; each kept peak suppresses any
    remaining same-class peak whose similarity to it (with s taken from the
    kept peak's range) exceeds ols_threshold.
    """
    for name, value in (("peak_threshold", peak_threshold),
                        ("ols_threshold", ols_threshold)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    range_axis, azimuth_axis = axes
    if confmaps.grid.shape[1:] != (len(range_axis), len(azimuth_axis)):
        raise ValueError(
            f"confmap grid {confmaps.grid.shape[1:]} does not match axes "
            f"({len(range_axis)}, {len(azimuth_axis)})"
        )

    peaks = []
    for ch, label in enumerate(confmaps.class_order):
        grid = confmaps.grid[ch]
        for i, j in local_maxima(grid):
            if grid[i, j] >= peak_threshold:
                peaks.append((float(grid[i, j]), i, j, label))
    # descending confidence, lowest (i, j) first among equals
    peaks.sort(key=lambda p: (-p[0], p[1], p[2]))

    kept: list[Detection] = []
    suppressed = [False] * len(peaks)
    for a, (conf, i, j, label) in enumerate(peaks):
        if suppressed[a]:
            continue
        det = Detection(
            class_label=label,
            range_m=float(range_axis[i]),
            azimuth_rad=float(azimuth_axis[j]),
            confidence=conf,
            bin=(i, j),
        )
        kept.append(det)
        for b in range(a + 1, len(peaks)):
            if suppressed[b] or peaks[b][3] != label:
                continue
            _, bi, bj, _ = peaks[b]
            d = cart_distance(det.range_m, det.azimuth_rad,
                              float(range_axis[bi]), float(azimuth_axis[bj]))
            s = max(det.range_m, 1e-9)
            if ols(d, s, kappa.for_class(label)) > ols_threshold:
                suppressed[b] = True
    return kept
