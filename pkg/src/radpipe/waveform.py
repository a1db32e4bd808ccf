"""FMCW waveform configuration and derived radar system parameters.

The waveform config holds the raw chirp/frame/antenna counts; resolution and
ambiguity figures are derived from first principles (bandwidth -> range
resolution, virtual array size -> angular resolution).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

SPEED_OF_LIGHT = 299_792_458.0  # m/s


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class WaveformConfig:
    """FMCW waveform parameters for one TDM-MIMO frame.

    Attributes:
        carrier_freq: Carrier frequency in Hz
        chirp_bandwidth: Effective (swept) chirp bandwidth in Hz
        n_chirps_per_frame: Chirps per frame (slow-time samples)
        n_tx: Transmit antenna count
        n_rx: Receive antenna count
        samples_per_chirp: Fast-time ADC samples per chirp (power of two)
        chirp_duration: Chirp repetition interval in seconds
        frame_rate: Radar frame rate in frames/s
    """

    carrier_freq: float = 77e9       # Hz
    chirp_bandwidth: float = 1.0246e9  # Hz
    n_chirps_per_frame: int = 255
    n_tx: int = 2
    n_rx: int = 4
    samples_per_chirp: int = 256
    chirp_duration: float = 60e-6    # s
    frame_rate: float = 15.0         # frames/s

    def __post_init__(self):
        positive = {
            "carrier_freq": self.carrier_freq,
            "chirp_bandwidth": self.chirp_bandwidth,
            "n_chirps_per_frame": self.n_chirps_per_frame,
            "n_tx": self.n_tx,
            "n_rx": self.n_rx,
            "samples_per_chirp": self.samples_per_chirp,
            "chirp_duration": self.chirp_duration,
            "frame_rate": self.frame_rate,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        if self.n_tx * self.n_rx < 2:
            raise ValueError("virtual array needs n_tx * n_rx >= 2")
        if not _is_power_of_two(self.samples_per_chirp):
            raise ValueError(
                f"samples_per_chirp must be a power of two, got {self.samples_per_chirp}"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str | bytes) -> "WaveformConfig":
        raw = json.loads(text)
        return cls(**raw)


@dataclass(frozen=True)
class RadarParams:
    """Resolution and ambiguity figures derived from a WaveformConfig."""

    range_resolution: float    # m
    unambiguous_range: float   # m
    n_virtual: int
    angular_resolution: float  # deg
    wavelength: float          # m


def derive_radar_params(cfg: WaveformConfig) -> RadarParams:
    """Derive range/angle resolution and ambiguity limits from the waveform.

    range_resolution = c / (2 B); unambiguous_range spans the full fast-time
    FFT (resolution * samples); angular resolution uses the 2/N-radian
    beamwidth of an N-element half-wavelength uniform array at boresight.
    """
    range_resolution = SPEED_OF_LIGHT / (2.0 * cfg.chirp_bandwidth)
    n_virtual = cfg.n_tx * cfg.n_rx
    return RadarParams(
        range_resolution=range_resolution,
        unambiguous_range=range_resolution * cfg.samples_per_chirp,
        n_virtual=n_virtual,
        angular_resolution=math.degrees(2.0 / n_virtual),
        wavelength=SPEED_OF_LIGHT / cfg.carrier_freq,
    )


def load_waveform(path) -> WaveformConfig:
    """Read a WaveformConfig from a JSON file."""
    with open(path, "rb") as fh:
        return WaveformConfig.from_json(fh.read())


def save_waveform(path, cfg: WaveformConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")
