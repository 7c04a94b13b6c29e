"""Temporal gating (intensity modulator) and detector timing response."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, special

from ._validation import check_positive, check_probability, check_scalar
from .exceptions import ConfigError, InsufficientResolutionError

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class TemporalGate:
    """Gaussian transmission window synchronised to the pump pulses.

    ``delay`` is the gate centre relative to the nominal pulse time. When
    omitted it defaults to half a FWHM, i.e. the window opens roughly as the
    decay starts.
    """

    fwhm: float = 200.0
    delay: float | None = None
    peak_transmission: float = 1.0

    def __post_init__(self):
        check_positive(self.fwhm, "gate.fwhm")
        if self.delay is None:
            object.__setattr__(self, "delay", 0.5 * float(self.fwhm))
        check_scalar(self.delay, "gate.delay")
        check_probability(self.peak_transmission, "gate.peak_transmission")

    @property
    def sigma(self):
        return self.fwhm * FWHM_TO_SIGMA

    def transmission(self, t):
        """Intensity transmission at time ``t`` relative to the pulse."""
        t = np.asarray(t, dtype=float)
        return self.peak_transmission * np.exp(-0.5 * ((t - self.delay) / self.sigma) ** 2)


@dataclass(frozen=True)
class DetectorIRF:
    """Gaussian timing response; ``resolution`` is the FWHM in ps.

    The resolution applies to start-stop time differences, so each detector
    contributes ``sigma / sqrt(2)`` when smearing individual timestamps.
    """

    resolution: float = 35.0

    def __post_init__(self):
        check_positive(self.resolution, "irf.resolution")

    @property
    def sigma(self):
        return self.resolution * FWHM_TO_SIGMA

    @property
    def per_detector_sigma(self):
        return self.sigma / math.sqrt(2.0)


# ---------------------------------------------------------------------------
# amplitude picture
# ---------------------------------------------------------------------------

def exponential_gate_transmission(offset, t1, gate):
    """Fraction of an exponential wavepacket transmitted by ``gate``.

    ``offset`` is the emission time relative to the pulse. Closed form of
    ``int_0^inf g(offset + u) exp(-u/t1)/t1 du``.
    """
    offset = np.asarray(offset, dtype=float)
    s = gate.sigma
    m = gate.delay - offset
    z = (s * s / t1 - m) / (s * math.sqrt(2.0))
    # (s/t1) sqrt(pi/2) exp(-m/t1 + s^2/2t1^2) erfc(z) = (s/t1) sqrt(pi/2) exp(-m^2/2s^2) erfcx(z)
    pos = z >= 0
    zp = np.where(pos, z, 0.0)
    a = np.exp(-0.5 * (m / s) ** 2) * special.erfcx(zp)
    b = np.exp(np.where(pos, 0.0, -m / t1 + 0.5 * (s / t1) ** 2)) * special.erfc(np.where(pos, 0.0, z))
    val = (s / t1) * math.sqrt(math.pi / 2.0) * np.where(pos, a, b)
    return gate.peak_transmission * val


@dataclass(frozen=True)
class WavepacketProfile:
    """Normalised single-photon amplitude ``sqrt(g(t)) psi(t)`` on ``t >= 0``.

    ``t`` is measured from the emission time; ``gate_offset`` is the gate
    centre measured on the same axis.
    """

    t1: float
    gate: TemporalGate | None = None
    emission_offset: float = 0.0
    transmission: float = 1.0

    def amplitude(self, t):
        t = np.asarray(t, dtype=float)
        env = np.where(t >= 0, np.exp(-np.clip(t, 0, None) / (2 * self.t1)) / math.sqrt(self.t1), 0.0)
        if self.gate is not None:
            env = env * np.sqrt(self.gate.transmission(t + self.emission_offset))
        return env / math.sqrt(self.transmission)

    def intensity(self, t):
        return self.amplitude(t) ** 2


def apply_gate_to_wavepacket(emitter, gate, emission_offset=0.0):
    """Truncate and renormalise the emitter's wavepacket with ``gate``.

    ``emission_offset`` is the emission time relative to the pulse (jitter).
    Passing ``gate=None`` returns the ungated exponential profile.
    """
    if gate is None:
        return WavepacketProfile(emitter.t1)
    trans = float(exponential_gate_transmission(emission_offset, emitter.t1, gate))
    if not trans > 0.0:
        raise ConfigError("gate transmits none of the wavepacket; cannot renormalise", "gate")
    return WavepacketProfile(emitter.t1, gate, float(emission_offset), trans)


def expected_gated_overlap(emitter, gate, step=None, window=12.0):
    """Ensemble-mean overlap of two simultaneously emitted, identically gated photons.

    Deterministic double quadrature of ``I(t) I(t') exp(-2 gamma* |t - t'|)``;
    serves as an oracle for the Monte Carlo with gating.
    """
    if step is None:
        step = min(emitter.t1, emitter.t2, gate.sigma if gate else emitter.t1) / 40.0
    t = np.arange(0.0, window * emitter.t1, step) + 0.5 * step
    prof = apply_gate_to_wavepacket(emitter, gate)
    inten = prof.intensity(t) * step
    inten /= inten.sum()
    c = 2.0 * emitter.pure_dephasing_rate
    # exact for the piecewise-constant intensity: cell-averaged kernel
    lag = np.abs(t[:, None] - t[None, :])
    kern = np.exp(-c * lag)
    if c > 0:
        cd = c * step
        kern[np.diag_indices_from(kern)] = 2.0 * (cd - 1.0 + math.exp(-cd)) / cd ** 2
    return float(inten @ kern @ inten)


# ---------------------------------------------------------------------------
# event picture
# ---------------------------------------------------------------------------

def apply_gate_to_events(events, gate, geometry=None, rng=None, pulse_times=None):
    """Keep each event with probability ``g(t_event - t_pulse)``.

    Parameters
    ----------
    events : EventStream
        Events to filter; left unchanged.
    gate : TemporalGate
    geometry : InterferometerGeometry, optional
        Used to locate each event's pulse as ``pulse_index * rep_period``
        when ``pulse_times`` is not given.
    rng : numpy.random.Generator
    pulse_times : array_like, optional
        Explicit pulse time per event.
    """
    from .montecarlo import EventStream

    if rng is None:
        rng = np.random.default_rng()
    if pulse_times is None:
        if geometry is None:
            raise ConfigError("need geometry or pulse_times to locate pulses", "gate")
        pulse_times = events.pulse_index * geometry.rep_period
    rel = events.timestamp - np.asarray(pulse_times, dtype=float)
    keep = rng.random(len(events)) < gate.transmission(rel)
    return EventStream(events.detector[keep], events.timestamp[keep], events.pulse_index[keep])


def gaussian_kernel_convolve(values, step, sigma):
    return ndimage.gaussian_filter1d(np.asarray(values, dtype=float), sigma / step,
                                     mode="nearest", truncate=8.0)


def convolve_with_irf(curve, step, irf):
    """Convolve a uniformly sampled curve with the detector response.

    Edges are extended with their end values. The sampling step must resolve
    the response: ``step <= resolution / 5``.
    """
    step = check_positive(step, "step")
    if step > irf.resolution / 5.0 * (1 + 1e-12):
        raise InsufficientResolutionError(
            f"sampling step {step} ps is coarser than resolution/5 = {irf.resolution / 5} ps")
    return gaussian_kernel_convolve(curve, step, irf.sigma)


def effective_lifetime(emitter, gate, n_events=1_000_000, seed=0):
    """Lifetime fitted to gated exponential arrivals (event picture).

    Simulates a standard lifetime measurement, gates it, and returns the
    :class:`~homsim.fitting.LifetimeFit` of the survivors.
    """
    from .fitting import fit_exponential_lifetime

    rng = np.random.default_rng(seed)
    jitter = emitter.jitter.sample(rng, n_events)
    t = jitter + rng.exponential(emitter.t1, n_events)
    if gate is not None:
        t = t[rng.random(n_events) < gate.transmission(t)]
    return fit_exponential_lifetime(t)
