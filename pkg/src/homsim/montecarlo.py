"""Monte Carlo forward model of the two-pulse HOM experiment.

Photons carry exponential amplitude envelopes and independent Wiener phase
trajectories (variance rate ``2 gamma*`` each). Pair overlaps are computed by
per-cell Gauss-Legendre quadrature of the amplitude product on a lattice of
step ``grid_step``, with the relative phase taken as the average of the
cell-endpoint phasors. Event streams are generated in fixed blocks of pulse
pairs, each with its own random substream, so the output does not depend on
how blocks are distributed over worker processes.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._validation import (check_int, check_nonnegative, check_positive,
                          check_probability, check_seed)
from .exceptions import ConfigError, InsufficientResolutionError
from .model import BeamSplitter, EmitterParams, InterferometerGeometry
from .shaping import DetectorIRF, TemporalGate, exponential_gate_transmission

#: pulse pairs per random substream
BLOCK_SIZE = 1024
#: trajectory window in units of t1
WINDOW_T1 = 8.0
#: minimum number of lattice cells under one envelope
MIN_CELLS = 16

_GL_X = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GL_W = np.array([5.0, 8.0, 5.0]) / 9.0


def block_rng(seed, block_index):
    """Independent generator for block ``block_index`` of a run seeded with ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=(int(block_index),))
    return np.random.Generator(np.random.PCG64(ss))


def default_grid_step(emitter):
    return min(emitter.t1, emitter.t2) / 20.0


def _check_grid(emitter, grid_step, window):
    if grid_step is None:
        grid_step = default_grid_step(emitter)
    grid_step = check_positive(grid_step, "time_grid_step")
    if window is None:
        window = WINDOW_T1 * emitter.t1
    window = check_positive(window, "window")
    if window / grid_step < MIN_CELLS:
        raise InsufficientResolutionError(
            f"only {window / grid_step:.1f} grid cells under the envelope; need {MIN_CELLS}")
    return grid_step, window


# ---------------------------------------------------------------------------
# quadrature kernel
# ---------------------------------------------------------------------------

def _amplitude(u, jitter, t1, gate, window):
    """Envelope at local time ``u`` after emission; zero outside [0, window]."""
    inside = (u >= 0.0) & (u <= window)
    uc = np.clip(u, 0.0, window)
    amp = np.exp(-uc / (2.0 * t1)) / math.sqrt(t1)
    if gate is not None:
        amp = amp * np.sqrt(gate.transmission(uc + jitter))
    return np.where(inside, amp, 0.0)


def _gl_cells(lo, hi, n_cells, dt, shift=None):
    """Cells ``[k dt - shift, (k+1) dt - shift]`` clipped to ``[lo, hi]`` per row.

    Returns the Gauss-Legendre nodes, shape (n, n_cells, 3), and half widths.
    """
    edges = np.arange(n_cells + 1) * dt
    edges = edges[None, :] if shift is None else edges[None, :] - shift[:, None]
    edges = np.clip(edges, lo[:, None], hi[:, None])
    half = 0.5 * np.diff(edges, axis=1)
    mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
    return mid[..., None] + half[..., None] * _GL_X, half


def _envelope_norm(s, jitter, dt, window, t1, gate):
    """GL norm of each envelope over its own lattice cells."""
    f = s - np.floor(s / dt) * dt
    n_cells = int(math.ceil(window / dt)) + 1
    zero = np.zeros_like(s)
    nodes, half = _gl_cells(zero, zero + window, n_cells, dt, shift=f)
    amp = _amplitude(nodes, jitter[:, None, None], t1, gate, window)
    return np.einsum("nkq,q,nk->n", amp * amp, _GL_W, half)


def overlap_kernel(s1, s2, j1, j2, phi1, phi2, dt, window, t1, gate=None):
    """Squared overlaps of photon pairs on a shared lattice.

    Parameters
    ----------
    s1, s2 : ndarray, shape (n,)
        Emission times measured from lattice node 0; ``min(s1, s2)`` must
        lie in ``[0, dt)``.
    j1, j2 : ndarray, shape (n,)
        Emission offsets from each photon's own pulse (for the gate).
    phi1, phi2 : ndarray, shape (n, K + 1)
        Phases at lattice nodes ``0 .. K``.
    """
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    n_cells = phi1.shape[1] - 1
    lo = np.maximum(s1, s2)
    hi = np.minimum(s1, s2) + window
    hi = np.maximum(hi, lo)
    if gate is None:
        # ungated envelopes: the per-cell integral of the product is exact
        edges = np.clip(np.arange(n_cells + 1) * dt, lo[:, None], hi[:, None])
        c = 0.5 * (s1 + s2)
        ex = np.exp(-(edges - c[:, None]) / t1)
        weights = ex[:, :-1] - ex[:, 1:]
        n1 = n2 = -math.expm1(-window / t1)
    else:
        nodes, half = _gl_cells(lo, hi, n_cells, dt)
        prod = (_amplitude(nodes - s1[:, None, None], j1[:, None, None], t1, gate, window)
                * _amplitude(nodes - s2[:, None, None], j2[:, None, None], t1, gate, window))
        weights = np.einsum("nkq,q,nk->nk", prod, _GL_W, half)
        n1 = _envelope_norm(s1, j1, dt, window, t1, gate)
        n2 = _envelope_norm(s2, j2, dt, window, t1, gate)
    dphi = phi2 - phi1
    cs, sn = np.cos(dphi), np.sin(dphi)
    re = np.einsum("nk,nk->n", weights, cs[:, :-1] + cs[:, 1:])
    im = np.einsum("nk,nk->n", weights, sn[:, :-1] + sn[:, 1:])
    integral_sq = 0.25 * (re * re + im * im)
    ov = integral_sq / (n1 * n2)
    return np.clip(ov, 0.0, 1.0)


# ---------------------------------------------------------------------------
# single-photon API
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PhotonRealization:
    """One emitted photon.

    ``phase`` holds the phase at lattice nodes ``first_node * grid_step +
    k * grid_step``, where ``first_node = floor(emission_time / grid_step)``.
    The envelope is the single-sided exponential from ``emission_time``.
    """

    pulse_time: float
    emission_time: float
    phase: np.ndarray
    grid_step: float
    window: float
    t1: float
    gate: TemporalGate | None = None

    @property
    def first_node(self):
        return int(math.floor(self.emission_time / self.grid_step))

    @property
    def jitter(self):
        return self.emission_time - self.pulse_time


def _phase_walk(rng, emitter, shape, dt):
    rate = 2.0 * emitter.pure_dephasing_rate
    inc = np.zeros(shape)
    if rate > 0.0:
        inc = rng.normal(0.0, math.sqrt(rate * dt), shape)
    phase = np.zeros(shape[:-1] + (shape[-1] + 1,))
    np.cumsum(inc, axis=-1, out=phase[..., 1:])
    return phase


def sample_photon(pulse_time, emitter, rng, grid_step=None, window=None, gate=None):
    """Draw a photon emitted after the pulse at ``pulse_time``.

    The emission time is the pulse time plus a jitter sample; the lifetime
    lives in the amplitude envelope, not in the emission time.
    """
    grid_step, window = _check_grid(emitter, grid_step, window)
    t_em = float(pulse_time) + float(emitter.jitter.sample(rng, 1)[0])
    n_cells = int(math.ceil(window / grid_step)) + 1
    phase = _phase_walk(rng, emitter, (n_cells,), grid_step)
    return PhotonRealization(float(pulse_time), t_em, phase, grid_step, window, emitter.t1, gate)


def pair_overlap(p1, p2, grid_step):
    """Squared overlap ``|<psi1|psi2>|^2`` of two realizations."""
    for p in (p1, p2):
        if p.grid_step != grid_step:
            raise ConfigError("photons were sampled on a different grid", "grid_step")
    if p1.window != p2.window or p1.t1 != p2.t1:
        raise ConfigError("photons come from different emitters", "window")
    dt, window = grid_step, p1.window
    if window / dt < MIN_CELLS:
        raise InsufficientResolutionError(f"fewer than {MIN_CELLS} grid cells per envelope")
    if abs(p1.emission_time - p2.emission_time) >= window:
        return 0.0
    origin = min(p1.first_node, p2.first_node)
    n_cells = len(p1.phase) - 1
    idx = np.arange(n_cells + 1) + origin

    def on_common(p):
        local = np.clip(idx - p.first_node, 0, len(p.phase) - 1)
        return p.phase[local][None, :]

    s1 = np.array([p1.emission_time - origin * dt])
    s2 = np.array([p2.emission_time - origin * dt])
    ov = overlap_kernel(s1, s2, np.array([p1.jitter]), np.array([p2.jitter]),
                        on_common(p1), on_common(p2), dt, window, p1.t1, p1.gate)
    return float(ov[0])


class HOMOutcome(enum.Enum):
    OPPOSITE_PORTS = "opposite"
    SAME_PORT = "same"


def opposite_port_probability(overlap_sq, bs):
    r, t = bs.reflectance, bs.transmittance
    return r * r + t * t - 2.0 * r * t * np.asarray(overlap_sq, dtype=float)


def hom_pair_outcome(overlap_sq, bs, rng):
    """Sample where a two-photon pair exits the output splitter."""
    overlap_sq = check_probability(overlap_sq, "overlap_sq")
    pc = float(opposite_port_probability(overlap_sq, bs))
    return HOMOutcome.OPPOSITE_PORTS if rng.random() < pc else HOMOutcome.SAME_PORT


# ---------------------------------------------------------------------------
# batch overlaps
# ---------------------------------------------------------------------------

def _batch_overlaps(rng, emitter, t_a, t_b, j_a, j_b, dt, window, gate):
    """Overlaps for photons arriving at relative times ``t_a`` and ``t_b``.

    Phases for both photons are drawn on a lattice anchored just before the
    earlier arrival of each pair.
    """
    n = len(t_a)
    if n == 0:
        return np.zeros(0)
    n_cells = int(math.ceil(window / dt)) + 1
    phi_a = _phase_walk(rng, emitter, (n, n_cells), dt)
    phi_b = _phase_walk(rng, emitter, (n, n_cells), dt)
    origin = np.floor(np.minimum(t_a, t_b) / dt) * dt
    s_a, s_b = t_a - origin, t_b - origin
    out = np.zeros(n)
    near = np.abs(t_a - t_b) < window
    if np.any(near):
        out[near] = overlap_kernel(s_a[near], s_b[near], j_a[near], j_b[near],
                                   phi_a[near], phi_b[near], dt, window, emitter.t1, gate)
    return out


def simulate_pair_overlaps(emitter, n_pairs, tau=0.0, seed=0, grid_step=None,
                           window=None, gate=None):
    """Sample ``n_pairs`` squared overlaps of photons offset by ``tau``.

    Photon two is emitted ``tau`` after photon one (plus the jitter of
    each). Blocks of :data:`BLOCK_SIZE` pairs use independent substreams.
    """
    n_pairs = check_int(n_pairs, "n_pairs", min_val=1)
    seed = check_seed(seed)
    dt, window = _check_grid(emitter, grid_step, window)
    out = []
    for b, start in enumerate(range(0, n_pairs, BLOCK_SIZE)):
        m = min(BLOCK_SIZE, n_pairs - start)
        rng = block_rng(seed, b)
        j = emitter.jitter.sample(rng, (m, 2))
        out.append(_batch_overlaps(rng, emitter, j[:, 0], tau + j[:, 1], j[:, 0], j[:, 1],
                                   dt, window, gate))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# event streams
# ---------------------------------------------------------------------------

class Detector(enum.IntEnum):
    D1 = 1
    D2 = 2


@dataclass(frozen=True)
class DetectionEvent:
    detector: Detector
    timestamp: float
    pulse_index: int


class EventStream:
    """Column store of detection events.

    ``pulse_index`` is the pulse-pair index (or pulse index for lifetime
    streams); dark counts carry ``-1``.
    """

    def __init__(self, detector, timestamp, pulse_index, diagnostics=None):
        self.detector = np.asarray(detector, dtype=np.uint8)
        self.timestamp = np.asarray(timestamp, dtype=np.float64)
        self.pulse_index = np.asarray(pulse_index, dtype=np.int64)
        if not (len(self.detector) == len(self.timestamp) == len(self.pulse_index)):
            raise ValueError("event columns differ in length")
        self.diagnostics = dict(diagnostics or {})

    def __len__(self):
        return len(self.timestamp)

    def __iter__(self):
        for d, t, i in zip(self.detector, self.timestamp, self.pulse_index):
            yield DetectionEvent(Detector(int(d)), float(t), int(i))

    def __repr__(self):
        return f"EventStream(n={len(self)})"

    @classmethod
    def from_events(cls, events):
        events = list(events)
        return cls([int(e.detector) for e in events], [e.timestamp for e in events],
                   [e.pulse_index for e in events])

    @classmethod
    def empty(cls):
        return cls([], [], [])

    def sorted(self):
        order = np.argsort(self.timestamp, kind="stable")
        return EventStream(self.detector[order], self.timestamp[order],
                           self.pulse_index[order], self.diagnostics)

    def is_sorted(self):
        return bool(np.all(np.diff(self.timestamp) >= 0))

    def equals(self, other):
        return (np.array_equal(self.detector, other.detector)
                and np.array_equal(self.timestamp, other.timestamp)
                and np.array_equal(self.pulse_index, other.pulse_index))


@dataclass(frozen=True)
class SimulationConfig:
    """Everything needed to generate one event stream.

    ``dark_count_rate`` is per detector, in Hz. ``forced_overlap``, when set,
    replaces the sampled overlap of every interfering pair (used for the
    distinguishable and perfect-photon limits).
    """

    emitter: EmitterParams
    bs: BeamSplitter = field(default_factory=BeamSplitter)
    geometry: InterferometerGeometry = field(default_factory=InterferometerGeometry)
    n_pulse_pairs: int = 10_000
    seed: int = 0
    time_grid_step: float | None = None
    gate: TemporalGate | None = None
    irf: DetectorIRF | None = None
    dark_count_rate: float = 0.0
    forced_overlap: float | None = None

    def __post_init__(self):
        check_int(self.n_pulse_pairs, "run.n_pulse_pairs", min_val=1)
        check_seed(self.seed, "run.seed")
        e = self.emitter
        if self.time_grid_step is None:
            object.__setattr__(self, "time_grid_step", default_grid_step(e))
        dt = check_positive(self.time_grid_step, "run.time_grid_step")
        limit = min(e.t1, e.t2) / 20.0
        if dt > limit * (1 + 1e-12):
            raise ConfigError(f"must be <= min(t1, t2)/20 = {limit} ps, got {dt}",
                              "run.time_grid_step")
        check_nonnegative(self.dark_count_rate, "run.dark_count_rate")
        if self.forced_overlap is not None:
            check_probability(self.forced_overlap, "run.forced_overlap")

    @property
    def n_blocks(self):
        return -(-self.n_pulse_pairs // BLOCK_SIZE)


def _route_marginal(long_arm, u, bs):
    # long arm feeds splitter input 1, short arm input 2
    to_d1 = np.where(long_arm, u < bs.transmittance, u >= bs.transmittance)
    return np.where(to_d1, Detector.D1, Detector.D2).astype(np.uint8)


def _simulate_block(cfg, block_index):
    start = block_index * BLOCK_SIZE
    m = min(BLOCK_SIZE, cfg.n_pulse_pairs - start)
    rng = block_rng(cfg.seed, block_index)
    e, g, bs = cfg.emitter, cfg.geometry, cfg.bs
    p, h, rep = g.pump_delay, g.hom_delay, g.rep_period

    present = rng.random((m, 2)) < e.emission_efficiency
    jit = e.jitter.sample(rng, (m, 2))
    if cfg.gate is not None:
        present &= rng.random((m, 2)) < exponential_gate_transmission(jit, e.t1, cfg.gate)
    long_arm = rng.random((m, 2)) < 0.5
    u_route = rng.random((m, 2))
    u_pair = rng.random((m, 2))

    idx = start + np.arange(m)
    offsets = np.array([0.0, p])
    # arrival relative to the pair's early pulse
    rel = offsets + jit + np.where(long_arm, h, 0.0)
    det = _route_marginal(long_arm, u_route, bs)

    inter = present[:, 0] & present[:, 1] & long_arm[:, 0] & ~long_arm[:, 1]
    k = np.flatnonzero(inter)
    if cfg.forced_overlap is not None:
        ov = np.full(len(k), cfg.forced_overlap)
    else:
        window = WINDOW_T1 * e.t1
        ov = _batch_overlaps(rng, e, rel[k, 0], rel[k, 1], jit[k, 0], jit[k, 1],
                             cfg.time_grid_step, window, cfg.gate)
    pc = opposite_port_probability(ov, bs)
    opposite = u_pair[k, 0] < pc
    r2, t2 = bs.reflectance ** 2, bs.transmittance ** 2
    p_trans = t2 / (r2 + t2) if r2 + t2 > 0 else 0.5
    transmitted = u_pair[k, 1] < p_trans
    d_first = np.where(opposite, np.where(transmitted, Detector.D1, Detector.D2),
                       np.where(u_pair[k, 1] < 0.5, Detector.D1, Detector.D2))
    d_second = np.where(opposite, np.where(transmitted, Detector.D2, Detector.D1), d_first)
    det[k, 0] = d_first
    det[k, 1] = d_second

    ts = (idx * rep)[:, None] + rel
    pulse = np.broadcast_to(idx[:, None], (m, 2))
    det, ts, pulse = det[present], ts[present], pulse[present]
    if cfg.irf is not None:
        ts = ts + rng.normal(0.0, cfg.irf.per_detector_sigma, len(ts))

    n_dark = 0
    if cfg.dark_count_rate > 0.0:
        span = m * rep
        lam = cfg.dark_count_rate * 1e-12 * span
        counts = rng.poisson(lam, 2)
        n_dark = int(counts.sum())
        dts = start * rep + rng.random(n_dark) * span
        ddet = np.repeat(np.array([Detector.D1, Detector.D2], dtype=np.uint8), counts)
        det = np.concatenate([det, ddet])
        ts = np.concatenate([ts, dts])
        pulse = np.concatenate([pulse, np.full(n_dark, -1, dtype=np.int64)])

    diag = {
        "photons": int(present.sum()),
        "interfering_pairs": int(len(k)),
        "overlap_sum": float(ov.sum()),
        "opposite_pairs": int(opposite.sum()),
        "dark_counts": n_dark,
    }
    return det, ts, pulse, diag


def _simulate_blocks(cfg, blocks):
    return [_simulate_block(cfg, b) for b in blocks]


def generate_event_stream(config, jobs=1):
    """Simulate the full detection-event stream for ``config``.

    Photon timestamps are the pulse time plus jitter plus the arm delay,
    smeared by the detector response when ``config.irf`` is set. The
    gate, if any, removes photons with the probability given by the
    transmitted fraction of their wavepacket and reshapes the envelope of
    the survivors for interference. The result is independent of ``jobs``.
    """
    jobs = check_int(jobs, "jobs", min_val=1)
    blocks = list(range(config.n_blocks))
    if jobs == 1 or len(blocks) == 1:
        parts = _simulate_blocks(config, blocks)
    else:
        chunks = [c for c in np.array_split(np.array(blocks), jobs) if len(c)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_simulate_blocks, [config] * len(chunks),
                               [c.tolist() for c in chunks])
            parts = [r for chunk in results for r in chunk]
    det = np.concatenate([q[0] for q in parts])
    ts = np.concatenate([q[1] for q in parts])
    pulse = np.concatenate([q[2] for q in parts])
    diag = {key: sum(q[3][key] for q in parts) for key in parts[0][3]}
    n_int = diag["interfering_pairs"]
    diag["mean_overlap"] = diag["overlap_sum"] / n_int if n_int else float("nan")
    diag["n_pulse_pairs"] = config.n_pulse_pairs
    return EventStream(det, ts, pulse, diag).sorted()


# ---------------------------------------------------------------------------
# auxiliary measurements
# ---------------------------------------------------------------------------

def simulate_lifetime_events(emitter, n_pulses, seed=0, rep_period=1e6 / 81.0,
                             gate=None, irf=None):
    """Single-detector lifetime measurement: pulse time + jitter + exponential decay.

    ``pulse_index`` is the pulse number, so ``pulse_index * rep_period`` is
    the trigger time. Emission efficiency applies; the gate, if any,
    acts on the full arrival time.
    """
    n_pulses = check_int(n_pulses, "n_pulses", min_val=1)
    seed = check_seed(seed)
    dets, times, pulses = [], [], []
    for b, start in enumerate(range(0, n_pulses, BLOCK_SIZE)):
        m = min(BLOCK_SIZE, n_pulses - start)
        rng = block_rng(seed, b)
        idx = start + np.arange(m)
        keep = rng.random(m) < emitter.emission_efficiency
        t = emitter.jitter.sample(rng, m) + rng.exponential(emitter.t1, m)
        if gate is not None:
            keep &= rng.random(m) < gate.transmission(t)
        if irf is not None:
            t = t + rng.normal(0.0, irf.per_detector_sigma, m)
        dets.append(np.full(keep.sum(), Detector.D1, dtype=np.uint8))
        times.append(idx[keep] * rep_period + t[keep])
        pulses.append(idx[keep])
    return EventStream(np.concatenate(dets), np.concatenate(times),
                       np.concatenate(pulses)).sorted()


@dataclass(frozen=True)
class DipSample:
    """Opposite-port time differences (D2 minus D1) from interfering pairs."""

    delta: np.ndarray
    n_pairs: int

    @property
    def n_coincidences(self):
        return len(self.delta)


def simulate_dip_events(emitter, n_pairs, tau=0.0, polarization="parallel", irf=None,
                        seed=0):
    """Time-resolved coincidences of the interfering pair (peak A).

    Each pair's detection times are drawn from the two envelopes (with a
    random photon-to-detector labelling) and accepted as an opposite-port
    event with the conditional probability implied by the two-photon
    amplitude, including the Wiener relative phase between the two detection
    times. ``polarization="orthogonal"`` drops the exchange term.
    """
    if polarization not in ("parallel", "orthogonal"):
        raise ConfigError("must be 'parallel' or 'orthogonal'", "polarization")
    n_pairs = check_int(n_pairs, "n_pairs", min_val=1)
    seed = check_seed(seed)
    t1 = emitter.t1
    rate4 = 4.0 * emitter.pure_dephasing_rate
    out = []
    for b, start in enumerate(range(0, n_pairs, 64 * BLOCK_SIZE)):
        m = min(64 * BLOCK_SIZE, n_pairs - start)
        rng = block_rng(seed, b)
        j = emitter.jitter.sample(rng, (m, 2))
        e1 = j[:, 0]
        e2 = tau + j[:, 1]
        swap = rng.random(m) < 0.5
        x1 = rng.exponential(t1, m)
        x2 = rng.exponential(t1, m)
        # t goes to D1, t' to D2
        t = np.where(swap, e2 + x2, e1 + x1)
        tp = np.where(swap, e1 + x1, e2 + x2)
        u = rng.random(m)
        x = rng.normal(0.0, 1.0, m) * np.sqrt(rate4 * np.abs(tp - t))
        if polarization == "parallel":
            def env(s, e0):
                return np.where(s >= e0, np.exp(-(s - e0) / t1), 0.0)
            a = env(t, e1) * env(tp, e2)
            bb = env(t, e2) * env(tp, e1)
            c = np.sqrt(a * bb)
            accept = u < 0.5 * (1.0 - 2.0 * c * np.cos(x) / (a + bb))
        else:
            accept = u < 0.5
        delta = tp[accept] - t[accept]
        if irf is not None:
            delta = delta + rng.normal(0.0, irf.sigma, len(delta))
        out.append(delta)
    return DipSample(np.concatenate(out), n_pairs)


def merge_streams(*streams):
    """Superpose independent event streams on a common clock.

    Used for the two-emitter surrogate: two independently seeded sources
    feeding the same interferometer. Diagnostics are summed where numeric.
    """
    if not streams:
        return EventStream.empty()
    det = np.concatenate([s.detector for s in streams])
    ts = np.concatenate([s.timestamp for s in streams])
    pulse = np.concatenate([s.pulse_index for s in streams])
    diag = {}
    for s in streams:
        for k, v in s.diagnostics.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                diag[k] = diag.get(k, 0) + v
    if diag.get("interfering_pairs"):
        diag["mean_overlap"] = diag["overlap_sum"] / diag["interfering_pairs"]
    return EventStream(det, ts, pulse, diag).sorted()
