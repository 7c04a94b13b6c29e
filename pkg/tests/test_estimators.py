import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from homsim.estimators import CoincidenceCurveRegressor, DipShapeRegressor, LifetimeEstimator
from homsim.histogram import CoincidenceHistogram
from homsim.model import EmitterParams, coincidence_probability
from homsim.montecarlo import simulate_dip_events

TAU = np.linspace(-2000, 2000, 15)


def test_params_roundtrip_and_clone():
    est = CoincidenceCurveRegressor(model="wavepacket", shared="t2", bootstrap=3)
    params = est.get_params()
    assert params["model"] == "wavepacket" and params["shared"] == "t2"
    other = clone(est).set_params(reflectance=0.45)
    assert other.reflectance == 0.45 and est.reflectance == 0.5


def test_curve_regressor_fit_predict():
    p = coincidence_probability(TAU, EmitterParams(800, 450))
    est = CoincidenceCurveRegressor().fit(TAU[:, None], p, sigma=0.01)
    assert est.t1_ == pytest.approx([800.0], rel=1e-6)
    assert est.t2_ == pytest.approx([450.0], rel=1e-6)
    assert est.predict(TAU[:, None]) == pytest.approx(p, abs=1e-9)
    assert est.score(TAU[:, None], p) == pytest.approx(1.0)


def test_curve_regressor_joint():
    X = np.column_stack([np.concatenate([TAU, TAU]), np.repeat([0, 1], 15)])
    y = np.concatenate([coincidence_probability(TAU, EmitterParams(375, 270)),
                        coincidence_probability(TAU, EmitterParams(220, 270))])
    est = CoincidenceCurveRegressor(shared="t2").fit(X, y, sigma=0.01)
    assert est.t1_ == pytest.approx([375, 220], rel=1e-6)
    with pytest.raises(ValueError, match="not seen"):
        est.predict(np.array([[0.0, 5.0]]))


def test_curve_regressor_validation():
    with pytest.raises(NotFittedError):
        CoincidenceCurveRegressor().predict(TAU[:, None])
    with pytest.raises(ValueError, match="integer"):
        CoincidenceCurveRegressor().fit(np.column_stack([TAU, np.full(15, 0.5)]), np.ones(15))
    with pytest.raises(ValueError):
        CoincidenceCurveRegressor().fit(TAU[:3, None], np.ones(3))


def test_dip_regressor():
    d = simulate_dip_events(EmitterParams(375, 270), 200_000, seed=2)
    h = CoincidenceHistogram.from_differences(d.delta, 20.0, 3.0)
    est = DipShapeRegressor(irf_fwhm=None).fit(h.centers[:, None], h.counts)
    assert est.weight_ == pytest.approx(1.0, abs=5 * est.weight_err_)
    pred = est.predict(h.centers[:, None])
    assert pred.sum() == pytest.approx(h.counts.sum(), rel=0.02)


def test_lifetime_estimator():
    x = np.random.default_rng(0).exponential(370.0, 100_000)
    est = LifetimeEstimator().fit(x)
    assert est.lifetime_ == pytest.approx(370, rel=0.02)
    assert est.score(x) > LifetimeEstimator().fit(x * 2).score(x)
