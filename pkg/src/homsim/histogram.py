"""Start-stop coincidence histograms and five-peak integration."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._validation import check_positive
from .exceptions import ConfigError, InsufficientStatisticsError
from .montecarlo import Detector


class PeakContaminationWarning(UserWarning):
    """An integration window reaches a neighbouring peak."""


@dataclass(frozen=True)
class CoincidenceHistogram:
    """Counts of start-stop time differences.

    Bins are centred on integer multiples of ``bin_width`` from ``-range``
    to ``+range`` (both in ps), so there are ``2 range / bin_width + 1`` bins.
    """

    bin_width: float
    range: float
    counts: np.ndarray

    def __post_init__(self):
        n = self.expected_bins(self.bin_width, self.range)
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (n,):
            raise ConfigError(f"expected {n} bins, got shape {counts.shape}", "counts")
        object.__setattr__(self, "counts", counts)

    @staticmethod
    def expected_bins(bin_width, range_ps):
        bin_width = check_positive(bin_width, "run.bin_width_ps")
        range_ps = check_positive(range_ps, "run.hist_range_ns")
        half = range_ps / bin_width
        if abs(half - round(half)) > 1e-9 * max(1.0, half):
            raise ConfigError(f"bin width {bin_width} ps does not divide the range "
                              f"{range_ps} ps evenly", "run.bin_width_ps")
        return 2 * int(round(half)) + 1

    @property
    def centers(self):
        k = (len(self.counts) - 1) // 2
        return np.arange(-k, k + 1) * self.bin_width

    @property
    def total(self):
        return int(self.counts.sum())

    @classmethod
    def from_differences(cls, diffs, bin_width=50.0, range_ns=20.0):
        """Histogram raw time differences (ps); values outside the range are dropped."""
        range_ps = range_ns * 1e3
        n = cls.expected_bins(bin_width, range_ps)
        k = (n - 1) // 2
        idx = np.floor(np.asarray(diffs, dtype=float) / bin_width + 0.5).astype(np.int64) + k
        idx = idx[(idx >= 0) & (idx < n)]
        return cls(bin_width, range_ps, np.bincount(idx, minlength=n))


def start_stop_differences(events, max_diff=None):
    """Start-stop time differences of a timestamp-sorted event stream.

    Every D1 event starts a clock stopped by the next D2 event at the same
    time or later, giving a positive difference. Every D2 event starts a
    clock stopped by the next D1 event strictly later, giving a negative
    difference. Differences larger than ``max_diff`` are discarded.
    """
    det = np.asarray(events.detector)
    ts = np.asarray(events.timestamp)
    if len(ts) and np.any(np.diff(ts) < 0):
        raise ConfigError("events must be sorted by timestamp", "events")
    t1 = ts[det == Detector.D1]
    t2 = ts[det == Detector.D2]
    out = []
    if len(t1) and len(t2):
        j = np.searchsorted(t2, t1, side="left")
        ok = j < len(t2)
        out.append(t2[j[ok]] - t1[ok])
        j = np.searchsorted(t1, t2, side="right")
        ok = j < len(t1)
        out.append(-(t1[j[ok]] - t2[ok]))
    d = np.concatenate(out) if out else np.zeros(0)
    if max_diff is not None:
        d = d[np.abs(d) <= max_diff]
    return d


def build_histogram(events, bin_width=50.0, range_ns=20.0):
    """Start-stop histogram of ``events`` (see :func:`start_stop_differences`)."""
    range_ps = range_ns * 1e3
    d = start_stop_differences(events, max_diff=range_ps + 0.5 * bin_width)
    return CoincidenceHistogram.from_differences(d, bin_width, range_ns)


@dataclass(frozen=True)
class PeakAreas:
    """Integrated coincidence counts.

    ``A`` is the interfering peak (both halves when the delay mismatch
    splits it), ``B1``/``B2`` the peaks at minus/plus the pump delay and
    ``C_minus``/``C_plus`` those at minus/plus the sum of both delays.
    ``side_peaks`` lists ``(center, counts)`` for peaks from neighbouring
    repetition periods. ``contaminated`` names correlated peaks whose window
    reaches a neighbouring peak.
    """

    A: int
    B1: int
    B2: int
    C_minus: int
    C_plus: int
    side_peaks: tuple = ()
    out_of_window: int = 0
    A_minus: int | None = None
    A_plus: int | None = None
    contaminated: tuple = ()

    def __post_init__(self):
        for name in ("A", "B1", "B2", "C_minus", "C_plus", "out_of_window"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def B(self):
        return self.B1 + self.B2

    @property
    def C(self):
        return self.C_minus + self.C_plus

    @property
    def side_total(self):
        return int(sum(c for _, c in self.side_peaks))

    @property
    def total(self):
        return self.A + self.B + self.C + self.side_total + self.out_of_window

    def side_cluster(self, center, period):
        """Side peaks within half a period of ``center``, keyed by offset from it."""
        return {round(c - center, 6): n for c, n in self.side_peaks
                if abs(c - center) < 0.5 * period}


def integrate_peaks(h, geometry, warn=True):
    """Sum counts in windows of ``geometry.integration_halfwidth`` around each peak.

    Each bin belongs to at most one window: where windows overlap, a bin is
    assigned to the nearest peak, so the areas plus ``out_of_window`` always
    add up to the histogram total. Windows use closed intervals on the bin
    centres.
    """
    hw = geometry.integration_halfwidth
    reach = geometry.pump_delay + geometry.hom_delay + hw
    if reach > h.range:
        raise ConfigError(f"peak windows reach {reach / 1e3:.3f} ns but the histogram "
                          f"only covers +/-{h.range / 1e3:.3f} ns", "run.hist_range_ns")
    x = h.centers
    offs = geometry.correlated_offsets()
    tau = abs(geometry.delay_mismatch)
    merged = tau < hw

    names, dists = [], []
    if merged:
        names.append("A")
        dists.append(np.maximum(np.abs(x) - tau, 0.0))
    else:
        names += ["A_minus", "A_plus"]
        dists += [np.abs(x + tau), np.abs(x - tau)]
    for name, c in (("B1", -offs["B"][1]), ("B2", offs["B"][1]),
                    ("C_minus", -offs["C"][1]), ("C_plus", offs["C"][1])):
        names.append(name)
        dists.append(np.abs(x - c))
    side = sorted({round(c, 6) for lab, c in geometry.peak_centers(n_cycles=8)
                   if lab == "side" and abs(c) + hw <= h.range})
    for c in side:
        names.append(("side", c))
        dists.append(np.abs(x - c))

    dist = np.vstack(dists)
    owner = np.argmin(dist, axis=0)
    inside = dist[owner, np.arange(len(x))] <= hw + 1e-9 * max(1.0, hw)
    sums = np.bincount(owner[inside], weights=h.counts[inside], minlength=len(names))
    sums = np.rint(sums).astype(np.int64)
    area = dict(zip([n for n in names if not isinstance(n, tuple)], sums))
    side_peaks = tuple((float(n[1]), int(s)) for n, s in zip(names, sums) if isinstance(n, tuple))
    if merged:
        a, a_minus, a_plus = int(area["A"]), None, None
    else:
        a_minus, a_plus = int(area["A_minus"]), int(area["A_plus"])
        a = a_minus + a_plus
    conflicts = geometry.window_conflicts()
    if conflicts and warn:
        warnings.warn(f"integration windows of peak(s) {', '.join(conflicts)} reach a "
                      "neighbouring peak", PeakContaminationWarning, stacklevel=2)
    return PeakAreas(a, int(area["B1"]), int(area["B2"]), int(area["C_minus"]),
                     int(area["C_plus"]), side_peaks, int(h.counts[~inside].sum()),
                     a_minus, a_plus, conflicts)


def normalized_opposite_probability(areas, return_error=False):
    """``A / (B1 + B2)`` with optional Poisson 1-sigma error.

    The error propagates independent Poisson errors of the numerator and
    denominator; with ``A = 0`` one count is used for the numerator variance.
    """
    b = areas.B1 + areas.B2
    if b <= 0:
        raise InsufficientStatisticsError("B1 + B2 is zero; cannot normalise peak A")
    p = areas.A / b
    if not return_error:
        return p
    sigma = math.sqrt(max(areas.A, 1) / b ** 2 + areas.A ** 2 / b ** 3)
    return p, sigma


def peak_ratios(areas):
    """``(A, B, C)`` per side, scaled so that C = 1.

    B and C are the means of their two sides; A counts both halves of the
    interfering peak. Distinguishable photons give 2:2:1.
    """
    c = 0.5 * areas.C
    if c <= 0:
        raise InsufficientStatisticsError("C peaks are empty")
    return areas.A / c, 0.5 * areas.B / c, 1.0


def ratio_sigma(num, den):
    """Poisson 1-sigma error of ``num / den`` for independent counts."""
    if den <= 0:
        raise InsufficientStatisticsError("empty denominator")
    r = num / den
    return r * math.sqrt(1.0 / max(num, 1) + 1.0 / den)
