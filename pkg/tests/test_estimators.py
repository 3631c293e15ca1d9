import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import random_psd
from pnpmatch import CQTFeatures, LMMatcher, PNPEncoder
from pnpmatch.ftm import NormalizedTheta, synthesize
from pnpmatch.metric import MetricCache, MetricRecord


def test_cqt_transformer():
    X = np.stack([synthesize(np.full(5, v)).samples for v in (-0.5, 0.5)])
    F = CQTFeatures().fit_transform(X)
    assert F.shape == (2, 240)
    assert not np.allclose(F[0], F[1])


def test_encoder_fit_predict(rng):
    X = rng.normal(size=(60, 12))
    y = np.tanh(X[:, :5])
    est = PNPEncoder(epochs=5, batch_size=8, hidden=(16,), epoch_fraction=1.0)
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, y)
    pred = est.predict(X)
    assert pred.shape == (60, 5) and np.all(np.abs(pred) < 1)
    assert len(est.train_log_) == 5
    assert clone(est).get_params() == est.get_params()


def test_encoder_pnp_needs_matching_metrics(rng):
    X = rng.normal(size=(30, 6))
    y = np.tanh(X[:, :5])
    cache = MetricCache([MetricRecord.from_matrix(random_psd(rng, 5), sample_id=i) for i in range(30)])
    est = PNPEncoder(loss="pnp", epochs=3, batch_size=8, hidden=(8,)).fit(X, y, metrics=cache)
    trace = est.lambda_trace_
    assert all(b in (a, a / 5) for a, b in zip(trace, trace[1:]))
    with pytest.raises(ValueError):
        PNPEncoder(pitch_mode="known").fit(X, y)


def test_matcher_fixed_point():
    truth = NormalizedTheta(np.array([0.1, 0.2, -0.3, 0.4]), pitch=0.25)
    X = synthesize(truth).samples[None, :]
    est = LMMatcher(pitch=0.25, max_iter=3).fit()
    out = est.predict(X, init=truth.values[None, :])
    np.testing.assert_array_equal(out[0], truth.values)
    assert est.results_[0].converged
