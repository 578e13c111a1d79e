"""Simulation and analysis of two-photon quantum beats at a beam splitter."""

from .core_model import (
    BeatModel,
    Polarization,
    Wavepacket,
    coherence_time,
    cross_correlation,
    filtered_visibility,
    joint_density,
    transform_limited_bandwidth,
    visibility,
)
from .montecarlo import ExperimentConfig, Mode, RecordBatch, run
from .correlator import CorrelationHistogram, correlate
from .analysis import fit_beat, fit_reference

__all__ = [
    "BeatModel",
    "CorrelationHistogram",
    "ExperimentConfig",
    "Mode",
    "Polarization",
    "RecordBatch",
    "Wavepacket",
    "coherence_time",
    "correlate",
    "cross_correlation",
    "filtered_visibility",
    "fit_beat",
    "fit_reference",
    "joint_density",
    "run",
    "transform_limited_bandwidth",
    "visibility",
]
