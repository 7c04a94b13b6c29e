"""Simulation and analysis of two-photon interference from pulsed single-photon sources."""

from .estimators import CoincidenceCurveRegressor, DipShapeRegressor, LifetimeEstimator
from .exceptions import (ConfigError, FitError, HOMError, InsufficientResolutionError,
                         InsufficientStatisticsError)
from .fitting import (Dataset, FitProblem, FitResult, fit_coincidence_curve, fit_dip_shape,
                      fit_exponential_lifetime)
from .histogram import (CoincidenceHistogram, PeakAreas, build_histogram, integrate_peaks,
                        normalized_opposite_probability, peak_ratios)
from .model import (BeamSplitter, EmitterParams, ExcitationScheme, InterferometerGeometry,
                    JitterKind, JitterMixture, JitterModel, coincidence_probability,
                    eq2_overlap, indistinguishability, scheme_jitter, wavepacket_overlap)
from .montecarlo import (Detector, EventStream, SimulationConfig, generate_event_stream,
                         merge_streams, simulate_dip_events, simulate_lifetime_events,
                         simulate_pair_overlaps)
from .shaping import DetectorIRF, TemporalGate, effective_lifetime, expected_gated_overlap

__version__ = "0.1.0"

__all__ = [
    "BeamSplitter", "CoincidenceCurveRegressor", "CoincidenceHistogram", "ConfigError",
    "Dataset", "Detector", "DetectorIRF", "DipShapeRegressor", "EmitterParams",
    "EventStream", "ExcitationScheme", "FitError", "FitProblem", "FitResult", "HOMError",
    "InsufficientResolutionError", "InsufficientStatisticsError", "InterferometerGeometry",
    "JitterKind", "JitterMixture", "JitterModel", "LifetimeEstimator", "PeakAreas",
    "SimulationConfig", "TemporalGate", "build_histogram", "coincidence_probability",
    "effective_lifetime", "eq2_overlap", "expected_gated_overlap", "fit_coincidence_curve",
    "fit_dip_shape", "fit_exponential_lifetime", "generate_event_stream", "indistinguishability",
    "integrate_peaks", "merge_streams", "normalized_opposite_probability", "peak_ratios",
    "scheme_jitter", "simulate_dip_events", "simulate_lifetime_events",
    "simulate_pair_overlaps", "wavepacket_overlap",
]
