import numpy as np
import pytest

from oracles import random_psd
from pnpmatch.encoder import (
    Adam,
    EncoderWeights,
    LambdaSchedule,
    Split,
    TrainConfig,
    backward,
    forward,
    head_loss,
    lambda_trace,
    predict,
    train,
    update_lambda,
)
from pnpmatch.exceptions import ContractError, FormatError, MissingMetricError
from pnpmatch.metric import MetricCache, MetricRecord


def toy_problem(rng, n=50, d=12, J=5):
    X = rng.normal(size=(n, d))
    A = rng.normal(size=(d, J)) / np.sqrt(d)
    theta = np.tanh(X @ A)
    return X, theta


def batch_loss(weights, X, theta, kind, M=None, lam=0.0):
    y, _ = forward(X, weights, training=True)
    value, _ = head_loss(y, theta, kind, M, lam)
    return value


def sampled_weight_gradients(rng, weights, X, theta, kind, M, lam, n=50, h=1e-6):
    """Backprop vs central differences on ``n`` random scalar weights.

    The last-layer bias is skipped: batch normalization removes it exactly,
    so its gradient is zero up to roundoff.
    """
    y, cache = forward(X, weights, training=True)
    _, dy = head_loss(y, theta, kind, M, lam)
    grads = backward(cache, dy, weights)
    params = weights.params()
    L = len(weights.W)
    candidates = [(k, i) for k, p in enumerate(params) if k != 2 * L - 1 for i in range(p.size)
                  if abs(grads[k].flat[i]) > 1e-6]
    picks = rng.choice(len(candidates), size=n, replace=False)
    out = []
    for c in picks:
        k, i = candidates[c]
        p = params[k]
        old = p.flat[i]
        p.flat[i] = old + h
        up = batch_loss(weights, X, theta, kind, M, lam)
        p.flat[i] = old - h
        down = batch_loss(weights, X, theta, kind, M, lam)
        p.flat[i] = old
        out.append((grads[k].flat[i], (up - down) / (2 * h)))
    return np.array(out)


def test_backprop_matches_fd_pnp(rng):
    X, theta = toy_problem(rng, n=16)
    weights = EncoderWeights.init([12, 32, 16, 5], seed=1)
    Ms = np.stack([random_psd(rng, 5) / 10 for _ in range(16)])
    pairs = sampled_weight_gradients(rng, weights, X, theta, "pnp", Ms, 0.3)
    rel = np.abs(pairs[:, 0] - pairs[:, 1]) / np.abs(pairs[:, 1])
    assert rel.max() < 1e-4


def test_backprop_inference_mode(rng):
    X, theta = toy_problem(rng, n=8)
    weights = EncoderWeights.init([12, 16, 5], seed=2)
    weights.running_mean = rng.normal(size=5)
    weights.running_var = rng.uniform(0.5, 2, 5)
    y, cache = forward(X, weights, training=False)
    _, dy = head_loss(y, theta, "p_loss")
    g = backward(cache, dy, weights)
    h = 1e-6
    W = weights.W[0]
    for i in rng.choice(W.size, 10, replace=False):
        old = W.flat[i]
        W.flat[i] = old + h
        up = head_loss(predict(weights, X), theta, "p_loss")[0]
        W.flat[i] = old - h
        down = head_loss(predict(weights, X), theta, "p_loss")[0]
        W.flat[i] = old
        assert g[0].flat[i] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-10)


def test_identity_metric_matches_p_loss_gradients(rng):
    X, theta = toy_problem(rng, n=10)
    weights = EncoderWeights.init([12, 16, 5], seed=3)
    y, cache = forward(X, weights, training=True)
    v1, d1 = head_loss(y, theta, "p_loss")
    v2, d2 = head_loss(y, theta, "pnp", np.broadcast_to(np.eye(5), (10, 5, 5)), 0.0)
    assert v1 == v2
    for a, b in zip(backward(cache, d1, weights), backward(cache, d2, weights)):
        np.testing.assert_array_equal(a, b)


def test_zero_error_gives_zero_gradient(rng):
    X, _ = toy_problem(rng, n=6)
    weights = EncoderWeights.init([12, 8, 5], seed=0)
    y, cache = forward(X, weights, training=True)
    _, dy = head_loss(y, y.copy(), "pnp", np.stack([random_psd(rng, 5) for _ in range(6)]), 1.0)
    assert all(not np.any(g) for g in backward(cache, dy, weights))


def test_zero_weights_give_constant_output(rng):
    weights = EncoderWeights.init([12, 8, 5], seed=0)
    for w in weights.W:
        w[:] = 0
    for b in weights.b:
        b[:] = 0
    weights.beta = np.linspace(-1, 1, 5)
    y = predict(weights, rng.normal(size=(4, 12)))
    np.testing.assert_allclose(y, np.tile(np.tanh(weights.beta), (4, 1)))


def test_outputs_bounded_and_repeatable(rng):
    weights = EncoderWeights.init([12, 32, 5], seed=0)
    X = rng.normal(size=(1000, 12))
    y = predict(weights, X)
    assert np.all(np.abs(y) < 1)
    # huge inputs saturate tanh to +-1 in floating point but never beyond
    assert np.all(np.abs(predict(weights, 1e6 * X)) <= 1)
    assert np.array_equal(y, predict(weights, X))
    with pytest.raises(ContractError):
        predict(weights, X[:, :5])


def test_lambda_schedule_examples():
    assert lambda_trace(1.0, [10, 9, 9.5, 8]) == [1.0, 0.2, 0.2, 0.04]
    assert lambda_trace(7.0, [3, 4, 5, 6]) == [7.0] * 4
    s = LambdaSchedule(1e20)
    for k in range(21):
        s = update_lambda(s, 100.0 - k)
    assert s.lam == pytest.approx(1e20 / 5**20)
    with pytest.raises(ValueError):
        LambdaSchedule(-1.0)


def test_adam_first_step_is_lr_sized():
    p = [np.array([1.0, -2.0])]
    Adam(p, lr=0.1).step(p, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [0.9, -1.9], rtol=1e-6)


def test_weights_round_trip(tmp_path, rng):
    w = EncoderWeights.init([240, 256, 64, 4], seed=5)
    w.running_var = rng.uniform(0.5, 2, 4)
    path = tmp_path / "w.pnpw"
    w.save(path)
    back = EncoderWeights.load(path)
    for a, b in zip(w.params() + [w.running_mean, w.running_var],
                    back.params() + [back.running_mean, back.running_var]):
        np.testing.assert_array_equal(a, b)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        EncoderWeights.load(path)


def test_config_round_trip(tmp_path):
    c = TrainConfig(loss="pnp", epochs=3, lr=5e-4, pitch_mode="known", hidden=(32, 8), seed=9)
    c.save(tmp_path / "c.txt")
    assert TrainConfig.load(tmp_path / "c.txt") == c
    assert c.J == 4 and c.effective_batch_size == 256
    assert TrainConfig(loss="spectral_fd").effective_batch_size == 64
    with pytest.raises(FormatError):
        TrainConfig.from_text("bogus=1\n")
    with pytest.raises(ValueError):
        TrainConfig(loss="mse")


def _toy_splits(rng, n=50):
    X, theta = toy_problem(rng, n=n + 10)
    ids = np.arange(n + 10)
    return Split(X[:n], theta[:n], ids[:n]), Split(X[n:], theta[n:], ids[n:])


def test_p_loss_training_halves_loss(rng):
    tr, va = _toy_splits(rng)
    cfg = TrainConfig(epochs=30, batch_size=10, lr=1e-2, hidden=(32, 16), epoch_fraction=1.0, seed=0)
    res = train(tr, va, cfg)
    losses = [row["train_loss"] for row in res.log]
    assert losses[-1] <= 0.5 * losses[0]


def test_training_replays_exactly(rng):
    tr, va = _toy_splits(rng)
    cfg = TrainConfig(epochs=5, batch_size=8, hidden=(16,), seed=4)
    a, b = train(tr, va, cfg), train(tr, va, cfg)
    assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]
    assert [r["val_loss"] for r in a.log] == [r["val_loss"] for r in b.log]


def _cache(rng, ids, J=5):
    return MetricCache([MetricRecord.from_matrix(random_psd(rng, J), sample_id=int(i)) for i in ids])


def test_pnp_requires_every_metric(rng):
    tr, va = _toy_splits(rng)
    cache = _cache(rng, tr.ids[:-1])
    with pytest.raises(MissingMetricError) as err:
        train(tr, va, TrainConfig(loss="pnp", epochs=1), metrics=cache)
    assert str(int(tr.ids[-1])) in str(err.value)


def test_large_lambda_pnp_tracks_p_loss(rng):
    tr, va = _toy_splits(rng)
    cache = _cache(rng, np.concatenate([tr.ids, va.ids]))
    lam0 = 1e6 * cache.max_eigenvalue()
    base = dict(epochs=4, batch_size=10, hidden=(16,), seed=2)
    p = train(tr, va, TrainConfig(loss="p_loss", **base))
    q = train(tr, va, TrainConfig(loss="pnp", lambda0=lam0, **base), metrics=cache)
    for rp, rq in zip(p.log, q.log):
        assert rq["train_loss"] / rq["lam"] == pytest.approx(rp["train_loss"], rel=1e-2)
    trace = q.lambda_trace
    assert all(b in (a, a / 5) for a, b in zip([lam0] + trace, trace))


def test_best_validation_weights_returned(rng):
    tr, va = _toy_splits(rng)
    res = train(tr, va, TrainConfig(epochs=6, batch_size=10, hidden=(16,), seed=1))
    best = min(r["val_loss"] for r in res.log)
    assert res.log[res.best_epoch]["val_loss"] == best
    y = predict(res.weights, va.X)
    assert head_loss(y, va.theta, "p_loss")[0] == pytest.approx(best, rel=1e-12)
