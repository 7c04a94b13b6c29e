"""Weighted least-squares estimation of lifetime and coherence time.

The optimiser is a small deterministic Levenberg-Marquardt loop working in
transformed coordinates, ``log t1`` and ``logit(t2 / (2 t1))``, so the bound
``t2 <= 2 t1`` holds at every iterate. Curvature-based uncertainties are
propagated back to (t1, t2) with the delta method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats

from ._validation import as_1d_float, check_int, check_positive
from .exceptions import ConfigError, FitError, InsufficientStatisticsError
from .model import BeamSplitter, eq2_overlap, eq2_overlap_partials, laplace_gauss

T1_MAX = 1e5
MODELS = ("eq2", "eq2_irf", "wavepacket")
_R_MAX_IRF = 1.0 - 1e-7


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    jac: np.ndarray
    residuals: np.ndarray
    n_iterations: int
    converged: bool


def levenberg_marquardt(fun, jac, x0, xtol=1e-8, max_iter=500):
    """Minimise ``sum(fun(x)**2)`` with Marquardt-scaled damping.

    Stops when the accepted step is below ``xtol * (|x| + xtol)`` or when no
    damped step improves the cost any more. Reaching ``max_iter`` returns the
    best point found with ``converged=False``.
    """
    x = np.array(x0, dtype=float)
    r = fun(x)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise FitError("objective is not finite at the starting point")
    J = jac(x)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ r
        d = np.diag(A).copy()
        d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1.0))
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(A + lam * np.diag(d), -g, rcond=None)[0]
            x_new = x + step
            # wild trial steps may overflow; they are rejected below
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                r_new = fun(x_new)
                c_new = float(r_new @ r_new)
            if math.isfinite(c_new) and c_new <= cost:
                break
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left at working precision
                return LMResult(x, cost, J, r, it, True)
        small = np.linalg.norm(step) < xtol * (np.linalg.norm(x) + xtol)
        x, r, cost = x_new, r_new, c_new
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            J = jac(x)
        lam = max(lam / 10.0, 1e-12)
        if small:
            return LMResult(x, cost, J, r, it, True)
    return LMResult(x, cost, J, r, max_iter, False)


def numeric_jacobian(fun, x, rel_step=1e-6):
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((fun(xp) - fun(xm)) / (2.0 * h))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# coincidence-curve problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """One P(tau) curve: delays (ps), probabilities and 1-sigma errors."""

    tau: np.ndarray
    p: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        tau = as_1d_float(self.tau, "tau")
        p = as_1d_float(self.p, "p")
        sigma = as_1d_float(self.sigma, "sigma")
        if not (len(tau) == len(p) == len(sigma)):
            raise ConfigError("tau, p and sigma differ in length", "dataset")
        if len(tau) < 4:
            raise ConfigError(f"need at least 4 points, got {len(tau)}", "dataset")
        if np.any(sigma <= 0):
            raise ConfigError("all sigma must be > 0", "dataset.sigma")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class FitProblem:
    """Datasets plus model choice for :func:`fit_coincidence_curve`.

    Parameters
    ----------
    datasets : sequence of Dataset or (tau, p, sigma) tuples
    model : {"eq2", "eq2_irf", "wavepacket"}
        ``eq2`` is the closed-form coincidence probability, ``eq2_irf`` the
        same convolved along the delay axis with ``irf``, and ``wavepacket``
        the exact ensemble mean of the Monte Carlo overlap,
        ``(t2/2t1) exp(-|tau|/t1)``.
    shared : subset of {"t1", "t2"}
        Parameters common to all datasets.
    bs : BeamSplitter
        Fixed splitter coefficients.
    """

    datasets: tuple
    model: str = "eq2"
    shared: frozenset = frozenset()
    bs: BeamSplitter = field(default_factory=BeamSplitter)
    irf: object = None
    t1_max: float = T1_MAX

    def __post_init__(self):
        ds = tuple(d if isinstance(d, Dataset) else Dataset(*d) for d in self.datasets)
        if not ds:
            raise ConfigError("need at least one dataset", "datasets")
        object.__setattr__(self, "datasets", ds)
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODELS}", "model")
        shared = frozenset(s.lower() for s in self.shared)
        if not shared <= {"t1", "t2"}:
            raise ConfigError(f"can only share t1/t2, got {sorted(shared)}", "shared")
        object.__setattr__(self, "shared", shared)
        if self.model == "eq2_irf" and self.irf is None:
            raise ConfigError("model 'eq2_irf' needs an irf", "irf")
        check_positive(self.t1_max, "t1_max")

    @property
    def n_datasets(self):
        return len(self.datasets)

    @property
    def n_params(self):
        k = self.n_datasets
        if self.shared == {"t1", "t2"}:
            return 2
        if self.shared:
            return 1 + k
        return 2 * k

    def unpack(self, theta):
        """Map transformed parameters to per-dataset ``(t1, ratio)`` arrays."""
        theta = np.asarray(theta, dtype=float)
        k = self.n_datasets
        if self.shared == {"t1", "t2"}:
            t1 = np.full(k, math.exp(theta[0]))
            r = np.full(k, special.expit(theta[1]))
        elif self.shared == {"t2"}:
            r = special.expit(theta[1:])
            t1 = math.exp(theta[0]) / (2.0 * r)
        elif self.shared == {"t1"}:
            t1 = np.full(k, math.exp(theta[0]))
            r = special.expit(theta[1:])
        else:
            t1 = np.exp(theta[0::2])
            r = special.expit(theta[1::2])
        return t1, r

    def pack(self, t1, r):
        t1 = np.broadcast_to(np.asarray(t1, dtype=float), (self.n_datasets,))
        r = np.broadcast_to(np.asarray(r, dtype=float), (self.n_datasets,))
        if self.shared == {"t1", "t2"}:
            return np.array([math.log(t1[0]), special.logit(r[0])])
        if self.shared == {"t2"}:
            return np.concatenate([[math.log(2.0 * r[0] * t1[0])], special.logit(r)])
        if self.shared == {"t1"}:
            return np.concatenate([[math.log(t1[0])], special.logit(r)])
        out = np.empty(2 * self.n_datasets)
        out[0::2] = np.log(t1)
        out[1::2] = special.logit(r)
        return out

    # -- model ---------------------------------------------------------------

    def overlap(self, tau, t1, r):
        if self.model == "eq2":
            return eq2_overlap(tau, t1, r)
        if self.model == "wavepacket":
            return r * np.exp(-np.abs(tau) / t1)
        r = min(r, _R_MAX_IRF)
        s = self.irf.sigma
        return r / (1.0 - r) * (laplace_gauss(tau, 2.0 / t1, s)
                                - r * laplace_gauss(tau, 2.0 / (r * t1), s))

    def overlap_partials(self, tau, t1, r):
        if self.model == "eq2":
            return eq2_overlap_partials(tau, t1, r)
        if self.model == "wavepacket":
            e = np.exp(-np.abs(tau) / t1)
            v = r * e
            return v, v * np.abs(tau) / t1 ** 2, e
        v = self.overlap(tau, t1, r)
        ht, hr = 1e-6 * t1, 1e-6
        dt = (self.overlap(tau, t1 + ht, r) - self.overlap(tau, t1 - ht, r)) / (2 * ht)
        rp, rm = min(r + hr, _R_MAX_IRF), r - hr
        dr = (self.overlap(tau, t1, rp) - self.overlap(tau, t1, rm)) / (rp - rm)
        return v, dt, dr

    def predict(self, tau, t1, r):
        kappa = self.bs.interference_factor
        return 0.5 - 0.5 * kappa * self.overlap(tau, t1, r)

    def residuals(self, theta):
        t1, r = self.unpack(theta)
        out = [(d.p - self.predict(d.tau, t1[i], r[i])) / d.sigma
               for i, d in enumerate(self.datasets)]
        return np.concatenate(out)

    def jacobian(self, theta):
        """Analytic Jacobian of :meth:`residuals` in transformed coordinates."""
        t1, r = self.unpack(theta)
        kappa = self.bs.interference_factor
        rows = []
        for i, d in enumerate(self.datasets):
            _, dv_dt1, dv_dr = self.overlap_partials(d.tau, t1[i], r[i])
            # residual = (p - 1/2 + kappa/2 V) / sigma
            dres_dt1 = 0.5 * kappa * dv_dt1 / d.sigma
            dres_dr = 0.5 * kappa * dv_dr / d.sigma
            block = np.zeros((len(d.tau), self.n_params))
            dlogit = r[i] * (1.0 - r[i])
            if self.shared == {"t1", "t2"}:
                block[:, 0] = dres_dt1 * t1[i]
                block[:, 1] = dres_dr * dlogit
            elif self.shared == {"t2"}:
                # t1 = T2 / (2 r): d t1/d log T2 = t1, d t1/d r = -t1 / r
                block[:, 0] = dres_dt1 * t1[i]
                block[:, 1 + i] = (dres_dr - dres_dt1 * t1[i] / r[i]) * dlogit
            elif self.shared == {"t1"}:
                block[:, 0] = dres_dt1 * t1[i]
                block[:, 1 + i] = dres_dr * dlogit
            else:
                block[:, 2 * i] = dres_dt1 * t1[i]
                block[:, 2 * i + 1] = dres_dr * dlogit
            rows.append(block)
        return np.vstack(rows)

    def objective(self, theta):
        r = self.residuals(theta)
        return float(r @ r)

    def gradient(self, theta):
        """Gradient of :meth:`objective`, ``2 J^T r``."""
        return 2.0 * self.jacobian(theta).T @ self.residuals(theta)

    # -- starting point --------------------------------------------------------

    def initial_guess(self, i):
        """Heuristic ``(t1, ratio)`` for dataset ``i``.

        The ratio comes from the point nearest zero delay and t1 from the
        delay at which the curve climbs back to 0.45.
        """
        d = self.datasets[i]
        kappa = self.bs.interference_factor
        a = np.abs(d.tau)
        order = np.argsort(a, kind="stable")
        a, p = a[order], d.p[order]
        v0 = (1.0 - 2.0 * p[0]) / kappa
        r0 = float(np.clip(v0, 0.02, 0.98))
        target = 0.45
        above = np.flatnonzero(p >= target)
        if len(above) and above[0] > 0:
            j = above[0]
            f = (target - p[j - 1]) / (p[j] - p[j - 1]) if p[j] != p[j - 1] else 0.5
            t45 = a[j - 1] + f * (a[j] - a[j - 1])
        elif len(above):
            t45 = max(a[0], 1.0)
        else:
            t45 = max(a[-1], 1.0)
        v45 = (1.0 - 2.0 * target) / kappa
        decay = math.log(max(v0, 1.5 * v45) / v45)
        scale = 2.0 if self.model != "wavepacket" else 1.0
        t1 = float(np.clip(scale * t45 / max(decay, 0.2), 1.0, self.t1_max))
        return t1, r0


@dataclass(frozen=True)
class FitResult:
    """Outcome of a coincidence-curve or dip-shape fit.

    ``t1``, ``t2`` and their errors hold one entry per dataset (shared
    parameters repeat). ``extra`` carries model-specific parameters such as
    the interference weight of a dip fit.
    """

    t1: np.ndarray
    t2: np.ndarray
    t1_err: np.ndarray
    t2_err: np.ndarray
    chi2: float
    dof: int
    converged: bool
    n_iterations: int
    params: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    model: str = "eq2"
    extra: dict = field(default_factory=dict)
    bootstrap: dict | None = None

    @property
    def chi2_reduced(self):
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    @property
    def indistinguishability(self):
        return self.t2 / (2.0 * self.t1)

    def as_dict(self):
        out = {
            "model": self.model,
            "t1_ps": self.t1.tolist(),
            "t2_ps": self.t2.tolist(),
            "t1_err_ps": self.t1_err.tolist(),
            "t2_err_ps": self.t2_err.tolist(),
            "indistinguishability": self.indistinguishability.tolist(),
            "chi2": self.chi2,
            "dof": self.dof,
            "chi2_reduced": self.chi2_reduced,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
        }
        out.update({k: (v.tolist() if isinstance(v, np.ndarray) else v)
                    for k, v in self.extra.items()})
        if self.bootstrap:
            out["bootstrap"] = {k: v.tolist() for k, v in self.bootstrap.items()}
        return out


def _propagate(problem, theta, cov):
    """Delta-method 1-sigma errors of per-dataset t1 and t2."""
    t1, r = problem.unpack(theta)
    n = len(theta)
    t1_err, t2_err = np.zeros(len(t1)), np.zeros(len(t1))
    for i in range(len(t1)):
        g1, g2 = np.zeros(n), np.zeros(n)
        h = 1e-7
        for j in range(n):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            a1, ar = problem.unpack(tp)
            b1, br = problem.unpack(tm)
            g1[j] = (a1[i] - b1[i]) / (2 * h)
            g2[j] = (2 * ar[i] * a1[i] - 2 * br[i] * b1[i]) / (2 * h)
        t1_err[i] = math.sqrt(max(g1 @ cov @ g1, 0.0))
        t2_err[i] = math.sqrt(max(g2 @ cov @ g2, 0.0))
    return t1_err, t2_err


def _check_identifiable(problem, check_dip=True):
    for i, d in enumerate(problem.datasets):
        if np.all(np.abs(d.tau) > 5.0 * problem.t1_max):
            raise FitError(f"dataset {i}: every delay exceeds 5 * t1_max; t2 is unidentifiable")
        if not check_dip:
            continue
        depth = (0.5 - d.p) / d.sigma
        if not np.any(depth > 2.0):
            raise FitError(f"dataset {i}: no point lies significantly below 1/2; "
                           "t1 and t2 are unidentifiable")


def _solve(problem, jac=None):
    jac = jac or problem.jacobian
    starts = []
    base = [problem.initial_guess(i) for i in range(problem.n_datasets)]
    t1b = np.array([b[0] for b in base])
    rb = np.array([b[1] for b in base])
    for f1 in (1.0, 0.5, 2.0):
        for fr in (1.0, 0.7):
            t1s = np.clip(t1b * f1, 1.0, problem.t1_max)
            rs = np.clip(rb * fr, 0.02, 0.98)
            if problem.shared:
                t1s = np.full_like(t1s, np.exp(np.mean(np.log(t1s))))
                if "t2" in problem.shared and "t1" not in problem.shared:
                    t2 = np.exp(np.mean(np.log(2 * rs * t1b * f1)))
                    t1s = np.clip(t1b * f1, 1.0, problem.t1_max)
                    rs = np.clip(t2 / (2 * t1s), 0.02, 0.98)
            starts.append(problem.pack(t1s, rs))
    best = None
    for x0 in starts:
        try:
            res = levenberg_marquardt(problem.residuals, jac, x0)
        except FitError:
            continue
        if best is None or res.cost < best.cost - 1e-12 * max(best.cost, 1.0):
            best = res
    if best is None:
        raise FitError("no starting point gave a finite objective")
    return best


def fit_coincidence_curve(problem, bootstrap=0, seed=0, check_dip=True):
    """Fit the coincidence probability model to one or more P(tau) curves.

    Parameters
    ----------
    problem : FitProblem
    bootstrap : int
        Number of residual-bootstrap resamples (0 disables).
    seed : int
        Seed for the bootstrap resampling.
    check_dip : bool
        Reject datasets without any point significantly below 1/2. Only
        meaningful when the errors are real measurement errors.

    Returns
    -------
    FitResult
    """
    if not isinstance(problem, FitProblem):
        raise ConfigError("expected a FitProblem", "problem")
    _check_identifiable(problem, check_dip)
    res = _solve(problem)
    theta = res.x
    cov = np.linalg.pinv(res.jac.T @ res.jac)
    t1, r = problem.unpack(theta)
    for i, d in enumerate(problem.datasets):
        a = np.abs(d.tau)
        if not np.any((a > 0) & (a <= 3.0 * t1[i])):
            raise FitError(f"dataset {i}: fitted t1 = {t1[i]:.3g} ps is not resolved by the "
                           "sampled delays; t1 is unidentifiable")
    t1_err, t2_err = _propagate(problem, theta, cov)
    n = sum(len(d.tau) for d in problem.datasets)
    boot = None
    if bootstrap:
        boot = _bootstrap(problem, theta, res.residuals, check_int(bootstrap, "bootstrap", min_val=1), seed)
    return FitResult(t1, 2.0 * r * t1, t1_err, t2_err, res.cost, n - len(theta),
                     res.converged, res.n_iterations, theta, cov, res.residuals,
                     problem.model, bootstrap=boot)


def _bootstrap(problem, theta, resid, n_boot, seed):
    rng = np.random.default_rng(seed)
    t1, r = problem.unpack(theta)
    fits_t1, fits_t2 = [], []
    offsets = np.cumsum([0] + [len(d.tau) for d in problem.datasets])
    for _ in range(n_boot):
        new = []
        for i, d in enumerate(problem.datasets):
            rr = resid[offsets[i]:offsets[i + 1]]
            pick = rr[rng.integers(0, len(rr), len(rr))]
            p = problem.predict(d.tau, t1[i], r[i]) + pick * d.sigma
            new.append(Dataset(d.tau, p, d.sigma))
        prob = FitProblem(tuple(new), problem.model, problem.shared, problem.bs,
                          problem.irf, problem.t1_max)
        try:
            b = levenberg_marquardt(prob.residuals, prob.jacobian, theta)
        except FitError:
            continue
        bt1, br = prob.unpack(b.x)
        fits_t1.append(bt1)
        fits_t2.append(2 * br * bt1)
    fits_t1, fits_t2 = np.array(fits_t1), np.array(fits_t2)
    return {"t1_std": fits_t1.std(axis=0, ddof=1), "t2_std": fits_t2.std(axis=0, ddof=1),
            "n": np.array(len(fits_t1))}


# ---------------------------------------------------------------------------
# time-resolved dip (peak A)
# ---------------------------------------------------------------------------

def dip_profile(delta, t1, t2, weight=1.0, irf=None, amplitude=1.0):
    """Coincidence density of peak A versus detection-time difference.

    ``amplitude / (4 t1) * [exp(-|d|/t1) - weight * exp(-2|d|/t2)]``, the
    opposite-port density of two photons emitted together, optionally
    convolved with the detector response. ``weight = 1`` is the parallel
    polarization case and ``weight = 0`` the orthogonal one. The first
    term integrates to 1/2; the second to ``weight * t2 / (4 t1)``.
    """
    delta = np.asarray(delta, dtype=float)
    s = 0.0 if irf is None else irf.sigma
    g = laplace_gauss(delta, 1.0 / t1, s) - weight * laplace_gauss(delta, 2.0 / t2, s)
    return amplitude / (4.0 * t1) * g


def _bin_average(fn, centers, width):
    x = np.asarray(centers, dtype=float)
    nodes = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)]) * 0.5 * width
    w = np.array([5.0, 8.0, 5.0]) / 18.0
    return sum(wi * fn(x + ni) for wi, ni in zip(w, nodes))


@dataclass(frozen=True)
class DipProblem:
    centers: np.ndarray
    counts: np.ndarray
    bin_width: float
    irf: object
    mode: str
    t2_bounds: tuple = (0.0, math.inf)

    def t2_of(self, t1, z):
        lo, hi = self.t2_bounds
        hi = min(hi, 2.0 * t1)
        return max(lo + (hi - lo) * special.expit(z), 1e-9 * t1)

    def model(self, theta):
        n = math.exp(theta[0])
        t1 = math.exp(theta[1])
        if self.mode == "orthogonal":
            t2, w = t1, 0.0
        else:
            t2 = self.t2_of(t1, theta[2])
            w = theta[3]
        return self.bin_width * _bin_average(
            lambda x: dip_profile(x, t1, t2, w, self.irf, n), self.centers, self.bin_width)

    def residuals(self, theta):
        # Poisson deviance residuals: least squares on these is the Poisson MLE
        m = np.maximum(self.model(theta), 1e-300)
        n = self.counts
        log_term = np.where(n > 0, n * np.log(np.where(n > 0, n, 1.0) / m), 0.0)
        dev = np.maximum(2.0 * (m - n + log_term), 0.0)
        return np.sign(n - m) * np.sqrt(dev)

    def jacobian(self, theta):
        return numeric_jacobian(self.residuals, theta)


def fit_dip_shape(centers, counts, bin_width, irf=None, mode="parallel", t1_max=T1_MAX,
                  t2_bounds=None):
    """Fit the time-resolved peak-A profile.

    Parameters
    ----------
    centers, counts : array_like
        Histogram of opposite-port time differences around peak A.
    bin_width : float
        Bin width in ps.
    irf : DetectorIRF, optional
    mode : {"parallel", "orthogonal"}
        ``parallel`` fits amplitude, t1, t2 and a free interference weight
        ``w``; ``orthogonal`` fits amplitude and t1 with ``w = 0``.
    t2_bounds : (float, float), optional
        Prior bounds on t2, further capped at ``2 t1``. When t2 may approach
        ``2 t1`` the two exponentials merge and ``w`` trades off against the
        amplitude, so bounds from an independent estimate of t2 are needed
        to test whether a profile shows interference at all.

    Returns
    -------
    FitResult
        ``extra`` holds ``amplitude``, ``weight`` and their errors.
    """
    if mode not in ("parallel", "orthogonal"):
        raise ConfigError("must be 'parallel' or 'orthogonal'", "mode")
    centers = as_1d_float(centers, "centers")
    counts = as_1d_float(counts, "counts")
    if len(centers) != len(counts) or len(centers) < 8:
        raise ConfigError("need at least 8 bins with matching centers/counts", "counts")
    if counts.sum() <= 0:
        raise InsufficientStatisticsError("dip histogram is empty")
    bin_width = check_positive(bin_width, "bin_width")
    if t2_bounds is None:
        t2_bounds = (0.0, math.inf)
    t2_bounds = (float(t2_bounds[0]), float(t2_bounds[1]))
    if not 0.0 <= t2_bounds[0] < t2_bounds[1]:
        raise ConfigError(f"invalid bounds {t2_bounds}", "t2_bounds")
    prob = DipProblem(centers, counts, bin_width, irf, mode, t2_bounds)

    # start: t1 from the mean |d| (exact for the no-interference profile)
    t1_0 = float(np.clip(np.sum(np.abs(centers) * counts) / counts.sum(), 10.0, t1_max))
    starts = []
    for f in (1.0, 0.6):
        if mode == "orthogonal":
            starts.append(np.array([0.0, math.log(t1_0 * f)]))
        else:
            for z0, w0 in ((0.0, 0.5), (1.4, 1.0)):
                starts.append(np.array([0.0, math.log(t1_0 * f), z0, w0]))
    best = None
    for x0 in starts:
        # rescale amplitude start so the model total matches the data total
        m = prob.model(x0).sum()
        if m > 0:
            x0 = x0.copy()
            x0[0] += math.log(counts.sum() / m)
        try:
            res = levenberg_marquardt(prob.residuals, prob.jacobian, x0)
        except FitError:
            continue
        if best is None or res.cost < best.cost - 1e-12 * max(best.cost, 1.0):
            best = res
    if best is None:
        raise FitError("dip fit failed from every starting point")
    theta = best.x
    cov = np.linalg.pinv(best.jac.T @ best.jac)
    amp, t1 = math.exp(theta[0]), math.exp(theta[1])
    amp_err = amp * math.sqrt(max(cov[0, 0], 0.0))
    t1_err = t1 * math.sqrt(max(cov[1, 1], 0.0))
    if mode == "orthogonal":
        t2, t2_err, w, w_err = float("nan"), float("nan"), 0.0, 0.0
    else:
        t2 = prob.t2_of(t1, theta[2])
        h = 1e-6
        g = np.array([0.0,
                      (prob.t2_of(t1 * math.exp(h), theta[2])
                       - prob.t2_of(t1 * math.exp(-h), theta[2])) / (2 * h),
                      (prob.t2_of(t1, theta[2] + h) - prob.t2_of(t1, theta[2] - h)) / (2 * h),
                      0.0])
        t2_err = math.sqrt(max(g @ cov @ g, 0.0))
        w, w_err = float(theta[3]), math.sqrt(max(cov[3, 3], 0.0))
    return FitResult(np.array([t1]), np.array([t2]), np.array([t1_err]), np.array([t2_err]),
                     best.cost, len(counts) - len(theta), best.converged, best.n_iterations,
                     theta, cov, best.residuals, f"dip_{mode}",
                     extra={"amplitude": amp, "amplitude_err": amp_err,
                            "weight": w, "weight_err": w_err})


# ---------------------------------------------------------------------------
# lifetime
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LifetimeFit:
    """Truncated-exponential maximum-likelihood lifetime.

    ``chi2_reduced`` and ``p_value`` compare the binned survivors to the
    fitted truncated exponential; ``consistent`` is False when the shape
    test rejects the exponential at the 1e-3 level.
    """

    lifetime: float
    lifetime_err: float
    n_used: int
    window: tuple
    chi2_reduced: float
    p_value: float

    @property
    def consistent(self):
        return self.p_value >= 1e-3


def _g(u):
    # mean of a unit-length truncated exponential with rate u
    u = float(u)
    if abs(u) < 1e-6:
        return 0.5 - u / 12.0
    if u > 700.0:
        return 1.0 / u
    return 1.0 / u - 1.0 / math.expm1(u)


def fit_exponential_lifetime(arrivals, lower_quantile=0.05, upper_quantile=0.95, n_bins=50):
    """Maximum-likelihood exponential lifetime over the central mass window.

    The arrivals between the two quantiles are fitted with an exponential
    truncated to that window. The fit is rejected (``FitError``) when the
    decay rate is not at least three standard errors above zero, which
    catches flat or rising distributions.
    """
    x = as_1d_float(arrivals, "arrivals")
    if len(x) < 100:
        raise InsufficientStatisticsError(f"need at least 100 arrivals, got {len(x)}")
    lo, hi = np.quantile(x, [lower_quantile, upper_quantile])
    sel = x[(x >= lo) & (x <= hi)] - lo
    span = hi - lo
    if not span > 0:
        raise FitError("arrival window has zero width")
    m = sel.mean() / span
    if m >= 0.5:
        raise FitError("arrival distribution does not decay within the fit window")
    u = optimize.brentq(lambda v: _g(v) - m, 1e-9, 1e4, xtol=1e-14, rtol=1e-14)
    lam = u / span
    n = len(sel)
    # Fisher information of a truncated exponential
    info = n * (1.0 / lam ** 2 - span ** 2 * math.exp(-u) / (-math.expm1(-u)) ** 2)
    lam_err = 1.0 / math.sqrt(info) if info > 0 else float("inf")
    if not lam > 3.0 * lam_err:
        raise FitError("decay rate is not significantly above zero; "
                       "arrivals are not exponential")
    edges = np.linspace(0.0, span, n_bins + 1)
    obs = np.histogram(sel, edges)[0]
    cdf = -np.expm1(-lam * edges) / -math.expm1(-u)
    exp = n * np.diff(cdf)
    chi2 = float(np.sum((obs - exp) ** 2 / np.maximum(exp, 1e-12)))
    dof = n_bins - 2
    return LifetimeFit(float(1.0 / lam), float(lam_err / lam ** 2), n, (float(lo), float(hi)),
                       chi2 / dof, float(stats.chi2.sf(chi2, dof)))
