"""Desk-scale FMCW radar object detection pipeline with semantic city-model
priors: simulation, RA maps, contrastive pretraining, confidence-map
detection with semantic-depth fusion, NMS, and OLS-based evaluation."""

__version__ = "0.1.0"

from .waveform import RadarParams, WaveformConfig, derive_radar_params

__all__ = ["RadarParams", "WaveformConfig", "derive_radar_params", "__version__"]
