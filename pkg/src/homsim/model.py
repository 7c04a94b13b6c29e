"""Value types and closed-form two-photon interference physics.

All times are picoseconds. The coincidence probability implemented here is
the pulsed-emitter expression with exponential lifetime ``t1`` and
exponential (pure-dephasing) coherence time ``t2``; it is normalised so that
fully distinguishable photons give 1/2.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from ._validation import (check_nonnegative, check_positive, check_probability,
                          check_scalar)
from .exceptions import ConfigError

# relative tolerance used when checking t2 <= 2 t1 and R + T = 1
_REL_TOL = 1e-12


# ---------------------------------------------------------------------------
# timing jitter
# ---------------------------------------------------------------------------

class JitterKind(str, enum.Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class JitterModel:
    """Random delay added to the emission time of each photon.

    ``width`` is the standard deviation for Gaussian jitter and the mean delay
    for exponential jitter. A zero width behaves exactly like ``NONE`` and
    draws nothing from the random generator.
    """

    kind: JitterKind = JitterKind.NONE
    width: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", JitterKind(self.kind))
        width = check_nonnegative(self.width, "jitter.width")
        if self.kind is JitterKind.NONE and width != 0.0:
            raise ConfigError("must be 0 for jitter kind 'none'", "jitter.width")
        object.__setattr__(self, "width", width)

    @classmethod
    def none(cls):
        return cls(JitterKind.NONE, 0.0)

    @classmethod
    def gaussian(cls, sigma):
        return cls(JitterKind.GAUSSIAN, sigma)

    @classmethod
    def exponential(cls, tau):
        return cls(JitterKind.EXPONENTIAL, tau)

    @property
    def is_trivial(self):
        return self.width == 0.0

    def sample(self, rng, size):
        if self.is_trivial:
            return np.zeros(size)
        if self.kind is JitterKind.GAUSSIAN:
            return rng.normal(0.0, self.width, size)
        return rng.exponential(self.width, size)


@dataclass(frozen=True)
class JitterMixture:
    """Two-component jitter mixture, used for the qualitative detuning mapping.

    With probability ``fraction`` a photon takes its delay from ``incoherent``,
    otherwise from ``coherent``.
    """

    coherent: JitterModel
    incoherent: JitterModel
    fraction: float

    def __post_init__(self):
        check_probability(self.fraction, "jitter.fraction")

    @property
    def is_trivial(self):
        return self.coherent.is_trivial and (self.fraction == 0.0 or self.incoherent.is_trivial)

    def sample(self, rng, size):
        if self.fraction == 0.0:
            return self.coherent.sample(rng, size)
        pick = rng.random(size) < self.fraction
        a = self.coherent.sample(rng, size)
        b = self.incoherent.sample(rng, size)
        return np.where(pick, b, a)


class ExcitationScheme(str, enum.Enum):
    ABOVE_BAND = "above_band"
    QUASI_RESONANT = "quasi_resonant"
    TWO_PHOTON_RESONANT = "two_photon_resonant"


#: default jitter presets in ps; see :func:`scheme_jitter`
QUASI_RESONANT_SIGMA = 3.0
BIEXCITON_LIFETIME = 370.0
ABOVE_BAND_SIGMA = 1000.0
DEFAULT_PUMP_DURATION = 2.5


def scheme_jitter(scheme, line="exciton", *, pump_duration=DEFAULT_PUMP_DURATION,
                  above_band_sigma=ABOVE_BAND_SIGMA,
                  biexciton_lifetime=BIEXCITON_LIFETIME,
                  quasi_resonant_sigma=QUASI_RESONANT_SIGMA):
    """Resolve an excitation scheme to its default :class:`JitterModel`.

    Quasi-resonant pumping relaxes through a few-ps phonon step; two-photon
    resonant pumping of the biexciton is limited by the pump pulse itself,
    while the exciton photon of the same cascade waits for the radiative
    biexciton decay. Above-band capture is slow and unquantified, hence the
    large configurable default.
    """
    scheme = ExcitationScheme(scheme)
    if line not in ("exciton", "biexciton"):
        raise ConfigError(f"unknown emission line {line!r}", "emitter.line")
    if scheme is ExcitationScheme.QUASI_RESONANT:
        if line == "biexciton":
            raise ConfigError("quasi-resonant excitation does not populate the biexciton",
                              "emitter.line")
        return JitterModel.gaussian(quasi_resonant_sigma)
    if scheme is ExcitationScheme.TWO_PHOTON_RESONANT:
        if line == "exciton":
            return JitterModel.exponential(biexciton_lifetime)
        return JitterModel.gaussian(pump_duration)
    return JitterModel.gaussian(above_band_sigma)


# ---------------------------------------------------------------------------
# emitter, optics and geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmitterParams:
    """Single-photon source description.

    Parameters
    ----------
    t1 : float
        Radiative lifetime (ps).
    t2 : float
        Coherence time (ps); must satisfy ``t2 <= 2 * t1``.
    jitter : JitterModel or JitterMixture
        Emission-time jitter.
    emission_efficiency : float
        Probability that a pulse yields a photon.
    """

    t1: float
    t2: float
    jitter: JitterModel = field(default_factory=JitterModel.none)
    emission_efficiency: float = 1.0

    def __post_init__(self):
        t1 = check_positive(self.t1, "emitter.t1")
        t2 = check_positive(self.t2, "emitter.t2")
        if t2 > 2.0 * t1 * (1.0 + _REL_TOL):
            raise ConfigError(f"t2={t2} exceeds 2*t1={2 * t1}", "emitter.t2")
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "t2", min(t2, 2.0 * t1))
        object.__setattr__(self, "emission_efficiency",
                           check_probability(self.emission_efficiency,
                                             "emitter.emission_efficiency"))

    @property
    def pure_dephasing_rate(self):
        """gamma* = 1/T2 - 1/(2 T1), in 1/ps."""
        return max(1.0 / self.t2 - 0.5 / self.t1, 0.0)

    @property
    def ratio(self):
        return self.t2 / (2.0 * self.t1)

    def with_jitter(self, jitter):
        return EmitterParams(self.t1, self.t2, jitter, self.emission_efficiency)


@dataclass(frozen=True)
class BeamSplitter:
    reflectance: float = 0.5
    transmittance: float = 0.5

    def __post_init__(self):
        r = check_probability(self.reflectance, "bs.reflectance")
        t = check_probability(self.transmittance, "bs.transmittance")
        if abs(r + t - 1.0) > 1e-9:
            raise ConfigError(f"R + T must equal 1, got {r + t}", "bs")
        object.__setattr__(self, "reflectance", r)
        object.__setattr__(self, "transmittance", t)

    @classmethod
    def from_reflectance(cls, r):
        r = check_probability(r, "bs.reflectance")
        return cls(r, 1.0 - r)

    @property
    def interference_factor(self):
        """2RT / (1 - 2RT); equal to one for a balanced splitter."""
        rt2 = 2.0 * self.reflectance * self.transmittance
        return rt2 / (1.0 - rt2)


@dataclass(frozen=True)
class FieldAmplitudePair:
    a1: complex
    a2: complex

    @property
    def norm(self):
        return abs(self.a1) ** 2 + abs(self.a2) ** 2


@dataclass(frozen=True)
class InterferometerGeometry:
    """Pump/analysis interferometer layout, in ps.

    ``pump_delay - hom_delay`` is the arrival-time mismatch of the two
    photons that can interfere. Use :meth:`from_ns` at I/O boundaries.
    """

    pump_delay: float = 3000.0
    hom_delay: float = 3000.0
    rep_period: float = 1e6 / 81.0
    integration_halfwidth: float = 1000.0

    def __post_init__(self):
        p = check_positive(self.pump_delay, "geometry.pump_delay")
        h = check_positive(self.hom_delay, "geometry.hom_delay")
        rep = check_positive(self.rep_period, "geometry.rep_period")
        hw = check_positive(self.integration_halfwidth, "geometry.integration_halfwidth")
        if p >= rep:
            raise ConfigError(
                f"pump_delay ({p} ps) must be shorter than rep_period ({rep} ps); "
                "pulses would collide", "geometry.pump_delay")
        limit = min(p, h, rep - 2.0 * h) / 2.0
        if not hw < limit:
            raise ConfigError(
                f"integration_halfwidth ({hw} ps) must be < min(pump_delay, hom_delay, "
                f"rep_period - 2*hom_delay)/2 = {limit} ps so peak windows stay disjoint",
                "geometry.integration_halfwidth")

    @classmethod
    def from_ns(cls, pump_delay=3.0, hom_delay=3.0, rep_period=None,
                integration_halfwidth=1.0, rep_rate_mhz=81.0, delay_offset_ps=0.0):
        if rep_period is None:
            rep_period = 1e3 / check_positive(rep_rate_mhz, "optics.rep_rate_mhz")
        return cls(pump_delay * 1e3 + delay_offset_ps, hom_delay * 1e3,
                   rep_period * 1e3, integration_halfwidth * 1e3)

    @property
    def delay_mismatch(self):
        return self.pump_delay - self.hom_delay

    def correlated_offsets(self):
        """Start-stop offsets of in-cycle photon pairs, keyed by peak family."""
        p, h = self.pump_delay, self.hom_delay
        return {"A": (-(p - h), p - h), "B": (-p, p), "C": (-(p + h), p + h)}

    def peak_centers(self, n_cycles=2):
        """Centres of every coincidence peak within ``n_cycles`` repetition periods.

        Returns a list of ``(label, center)``; in-cycle peaks are labelled
        ``A``, ``B`` or ``C`` and all others ``side``.
        """
        p, h = self.pump_delay, self.hom_delay
        slots = np.array([0.0, h, p, p + h])
        every = np.unique(np.round((slots[:, None] - slots[None, :]).ravel(), 9))
        # within one cycle only early/late combinations are possible
        same = np.unique(np.round(np.concatenate([slots[2:] - s for s in slots[:2]]), 9))
        same = np.concatenate([same, -same])
        out = [(None, d) for d in np.unique(same)]
        for k in range(-n_cycles, n_cycles + 1):
            if k:
                out.extend(("side", k * self.rep_period + d) for d in every)
        named = {}
        for key, (lo, hi) in self.correlated_offsets().items():
            named[round(lo, 6)] = key
            named[round(hi, 6)] = key
        return [(lab or named.get(round(c, 6), "A"), c) for lab, c in out]

    def window_conflicts(self):
        """Correlated peaks whose integration window reaches another peak.

        The basic layout rule keeps A, B and C apart from each other, but at
        some repetition periods a neighbouring cycle's peak lands inside the
        C window (at 81 MHz with 3 ns delays it sits 0.35 ns from C). Such
        areas are still integrated and are flagged rather than rejected.
        """
        hw = self.integration_halfwidth
        centers = self.peak_centers()
        tau = abs(self.delay_mismatch)
        bad = set()
        for key, offs in self.correlated_offsets().items():
            for c in offs:
                for lab, other in centers:
                    if abs(other - c) < 1e-6:
                        continue
                    if key == "A" and lab == "A" and tau < hw:
                        continue  # the two halves of A are merged
                    if abs(other - c) < 2.0 * hw:
                        bad.add(key)
        return tuple(sorted(bad))


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def beamsplitter_transform(pair, bs):
    """Apply the lossless splitter field transform to two input amplitudes."""
    st = math.sqrt(bs.transmittance)
    sr = math.sqrt(bs.reflectance)
    a1 = complex(pair.a1)
    a2 = complex(pair.a2)
    return FieldAmplitudePair(st * a1 + 1j * sr * a2, st * a2 + 1j * sr * a1)


def _phi(x):
    """(1 - exp(-x)) / x with its x -> 0 limit."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    series = 1.0 - x / 2.0 + x * x / 6.0 - x ** 3 / 24.0
    return np.where(small, series, -np.expm1(-xs) / xs)


def _dphi(x):
    """Derivative of :func:`_phi`."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    series = -0.5 + x / 3.0 - x * x / 8.0 + x ** 3 / 30.0
    return np.where(small, series, (np.exp(-xs) - _phi(xs)) / xs)


def eq2_overlap(tau, t1, ratio):
    """Interference term of the coincidence formula in (t1, t2/(2 t1)) form.

    Uses the regrouped expression ``exp(-s) * (s * phi(x) + r * exp(-x))``
    with ``s = 2|tau|/t1`` and ``x = s (1 - r) / r``, which is finite and smooth
    through the t2 -> 2 t1 limit.
    """
    tau = np.abs(np.asarray(tau, dtype=float))
    s = 2.0 * tau / t1
    x = s * (1.0 - ratio) / ratio
    return np.exp(-s) * (s * _phi(x) + ratio * np.exp(-x))


def eq2_overlap_partials(tau, t1, ratio):
    """Value and partial derivatives of :func:`eq2_overlap` w.r.t. t1 and ratio."""
    tau = np.abs(np.asarray(tau, dtype=float))
    s = 2.0 * tau / t1
    q = (1.0 - ratio) / ratio
    x = s * q
    es, ex = np.exp(-s), np.exp(-x)
    ph, dph = _phi(x), _dphi(x)
    v = es * (s * ph + ratio * ex)
    dv_ds = -v + es * (ph + s * dph * q - ratio * ex * q)
    x_r = -s / ratio ** 2
    dv_dr = es * (s * dph * x_r + ex - ratio * ex * x_r)
    dv_dt1 = dv_ds * (-s / t1)
    return v, dv_dt1, dv_dr


def mean_squared_overlap(tau, emitter):
    """Ensemble-mean squared wavepacket overlap implied by the coincidence formula."""
    return eq2_overlap(tau, emitter.t1, emitter.ratio)


def coincidence_probability(tau, emitter, bs=BeamSplitter()):
    """Probability of detecting the two photons at opposite outputs.

    Returns 1/2 for fully distinguishable photons and ``(1 - t2/(2 t1))/2``
    at zero delay on a balanced splitter. Accepts scalar or array ``tau``.
    """
    v = mean_squared_overlap(tau, emitter)
    p = 0.5 - 0.5 * bs.interference_factor * v
    return float(p) if np.ndim(p) == 0 else p


def indistinguishability(emitter):
    """t2 / (2 t1), equal to 1 - 2 P(0) on a balanced splitter."""
    return emitter.t2 / (2.0 * emitter.t1)


def wavepacket_overlap(tau, emitter):
    """Exact ensemble mean of |<psi1|psi2>|^2 for Wiener-dephased exponential wavepackets.

    This is what the Monte Carlo realises: ``(t2 / 2 t1) * exp(-|tau| / t1)``.
    It agrees with :func:`mean_squared_overlap` at zero delay only.
    """
    tau = np.abs(np.asarray(tau, dtype=float))
    v = emitter.ratio * np.exp(-tau / emitter.t1)
    return float(v) if v.ndim == 0 else v


def laplace_gauss(t, rate, sigma):
    """``exp(-rate |t|)`` convolved with a unit-area Gaussian of width ``sigma``."""
    t = np.asarray(t, dtype=float)
    if sigma <= 0.0:
        return np.exp(-rate * np.abs(t))
    c = sigma * math.sqrt(2.0)
    out = np.zeros_like(t)
    for sign in (1.0, -1.0):
        u = (rate * sigma ** 2 - sign * t) / c
        # exp(a^2 s^2/2 - a t) erfc(u) evaluated without overflow
        pos = u >= 0
        up = np.where(pos, u, 0.0)
        a = np.exp(-(t ** 2) / (2 * sigma ** 2)) * special.erfcx(up)
        expo = np.where(pos, 0.0, 0.5 * (rate * sigma) ** 2 - sign * rate * t)
        b = np.exp(expo) * special.erfc(np.where(pos, 0.0, u))
        out += 0.5 * np.where(pos, a, b)
    return out


def jitter_averaged_overlap(tau, emitter):
    """:func:`wavepacket_overlap` averaged over the relative emission jitter.

    Closed form for Gaussian and exponential jitter; numerical quadrature
    for mixtures.
    """
    jit = emitter.jitter
    r, a = emitter.ratio, 1.0 / emitter.t1
    tau_arr = np.abs(np.asarray(tau, dtype=float))
    if jit.is_trivial:
        v = r * np.exp(-a * tau_arr)
    elif isinstance(jit, JitterModel) and jit.kind is JitterKind.GAUSSIAN:
        v = r * laplace_gauss(tau_arr, a, math.sqrt(2.0) * jit.width)
    elif isinstance(jit, JitterModel):
        b = 1.0 / jit.width
        if abs(b - a) < 1e-9 * a:
            b = a * (1 + 1e-6)
        v = r * b * (b * np.exp(-a * tau_arr) - a * np.exp(-b * tau_arr)) / (b * b - a * a)
    else:
        # mixtures: Monte Carlo average over sampled offsets, fixed seed
        rng = np.random.default_rng(20140101)
        d = jit.sample(rng, 400_000) - jit.sample(rng, 400_000)
        v = np.array([r * np.mean(np.exp(-a * np.abs(t + d))) for t in np.atleast_1d(tau_arr)])
        v = v.reshape(tau_arr.shape)
    return float(v) if np.ndim(v) == 0 else v


def check_balanced_enough(bs):
    """Reject splitters outside the near-balanced range where the formula is meaningful."""
    check_scalar(bs.reflectance, "bs.reflectance", min_val=0.3, max_val=0.7)
    return bs
