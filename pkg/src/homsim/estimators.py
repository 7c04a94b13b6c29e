"""scikit-learn style wrappers around the fitting routines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fitting import (Dataset, FitProblem, dip_profile, fit_coincidence_curve,
                      fit_dip_shape, fit_exponential_lifetime)
from .model import BeamSplitter
from .shaping import DetectorIRF


def _split_groups(X):
    tau = X[:, 0]
    if X.shape[1] == 1:
        return tau, np.zeros(len(tau), dtype=int)
    groups = X[:, 1]
    if not np.all(groups == np.round(groups)) or np.any(groups < 0):
        raise ValueError("second column of X must hold non-negative integer dataset ids")
    return tau, groups.astype(int)


class CoincidenceCurveRegressor(RegressorMixin, BaseEstimator):
    """Fit P(tau) curves for lifetime and coherence time.

    ``X`` has the delay (ps) in its first column and, optionally, an integer
    dataset id in the second for joint fits.

    Parameters
    ----------
    model : {"eq2", "eq2_irf", "wavepacket"}
    shared : str or tuple of str, optional
        Parameters shared across datasets, e.g. ``"t2"``.
    reflectance : float
    irf_fwhm : float, optional
        Detector resolution (ps) for ``model="eq2_irf"``.
    bootstrap : int
        Residual-bootstrap resamples.
    random_state : int
    """

    def __init__(self, model="eq2", shared=None, reflectance=0.5, irf_fwhm=None,
                 bootstrap=0, random_state=0):
        self.model = model
        self.shared = shared
        self.reflectance = reflectance
        self.irf_fwhm = irf_fwhm
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _problem(self, datasets):
        shared = self.shared or ()
        if isinstance(shared, str):
            shared = (shared,)
        irf = DetectorIRF(self.irf_fwhm) if self.irf_fwhm else None
        return FitProblem(tuple(datasets), self.model, frozenset(shared),
                          BeamSplitter.from_reflectance(self.reflectance), irf)

    def fit(self, X, y, sigma=None):
        """Fit; ``sigma`` are the 1-sigma errors of ``y`` (unit weights if omitted)."""
        X, y = check_X_y(X, y, ensure_min_samples=4, y_numeric=True)
        if X.shape[1] > 2:
            raise ValueError("X must have one or two columns")
        tau, groups = _split_groups(X)
        weighted = sigma is not None
        sigma = np.ones_like(y) if sigma is None else np.broadcast_to(
            np.asarray(sigma, dtype=float), y.shape)
        self.groups_ = np.unique(groups)
        datasets = [Dataset(tau[groups == g], y[groups == g], sigma[groups == g])
                    for g in self.groups_]
        problem = self._problem(datasets)
        self.result_ = fit_coincidence_curve(problem, bootstrap=self.bootstrap,
                                             seed=self.random_state, check_dip=weighted)
        self.problem_ = problem
        self.t1_ = self.result_.t1
        self.t2_ = self.result_.t2
        self.t1_err_ = self.result_.t1_err
        self.t2_err_ = self.result_.t2_err
        self.indistinguishability_ = self.result_.indistinguishability
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X)
        tau, groups = _split_groups(X)
        out = np.empty(len(tau))
        lookup = {g: i for i, g in enumerate(self.groups_)}
        t1, r = self.problem_.unpack(self.result_.params)
        for g in np.unique(groups):
            if g not in lookup:
                raise ValueError(f"dataset id {g} was not seen during fit")
            i = lookup[g]
            m = groups == g
            out[m] = self.problem_.predict(tau[m], t1[i], r[i])
        return out


class DipShapeRegressor(RegressorMixin, BaseEstimator):
    """Fit the time-resolved peak-A histogram (``X`` = bin centres, ``y`` = counts)."""

    def __init__(self, mode="parallel", irf_fwhm=35.0, bin_width=None, t2_bounds=None):
        self.mode = mode
        self.irf_fwhm = irf_fwhm
        self.bin_width = bin_width
        self.t2_bounds = t2_bounds

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=8, y_numeric=True)
        centers = X[:, 0]
        width = self.bin_width or float(np.median(np.diff(np.sort(centers))))
        irf = DetectorIRF(self.irf_fwhm) if self.irf_fwhm else None
        self.result_ = fit_dip_shape(centers, y, width, irf, self.mode,
                                     t2_bounds=self.t2_bounds)
        self.bin_width_ = width
        self.irf_ = irf
        self.t1_ = float(self.result_.t1[0])
        self.t2_ = float(self.result_.t2[0])
        self.weight_ = self.result_.extra["weight"]
        self.weight_err_ = self.result_.extra["weight_err"]
        self.amplitude_ = self.result_.extra["amplitude"]
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X)
        t2 = self.t2_ if self.mode == "parallel" else self.t1_
        return self.bin_width_ * dip_profile(X[:, 0], self.t1_, t2, self.weight_,
                                             self.irf_, self.amplitude_)


class LifetimeEstimator(BaseEstimator):
    """Exponential lifetime from arrival times (``X`` of shape (n,) or (n, 1))."""

    def __init__(self, lower_quantile=0.05, upper_quantile=0.95):
        self.lower_quantile = lower_quantile
        self.upper_quantile = upper_quantile

    def fit(self, X, y=None):
        X = check_array(np.asarray(X, dtype=float).reshape(len(X), -1), ensure_min_samples=100)
        self.result_ = fit_exponential_lifetime(X[:, 0], self.lower_quantile,
                                                self.upper_quantile)
        self.lifetime_ = self.result_.lifetime
        self.lifetime_err_ = self.result_.lifetime_err
        self.n_features_in_ = 1
        return self

    def score(self, X, y=None):
        """Mean log-likelihood of the arrivals inside the fitted window."""
        check_is_fitted(self, "result_")
        x = np.asarray(X, dtype=float).ravel()
        lo, hi = self.result_.window
        x = x[(x >= lo) & (x <= hi)] - lo
        lam = 1.0 / self.lifetime_
        norm = -np.expm1(-lam * (hi - lo))
        return float(np.mean(np.log(lam) - lam * x - np.log(norm)))
