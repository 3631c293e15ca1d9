"""scikit-learn style wrappers around the encoder, the matcher and the features."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .encoder import Split, TrainConfig, predict, train
from .features import cqt_features
from .ftm import AudioBuffer, NormalizedTheta
from .matcher import MatchOptions, match


class CQTFeatures(TransformerMixin, BaseEstimator):
    """Pooled log-CQT encoder input for a batch of equal-length signals."""

    def __init__(self, sample_rate=22050):
        self.sample_rate = sample_rate

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_array(X, dtype=float)
        return np.stack([cqt_features(AudioBuffer(x, self.sample_rate)) for x in X])


class PNPEncoder(RegressorMixin, BaseEstimator):
    """MLP regressor from features to normalized parameters.

    With ``loss="pnp"`` pass ``metrics`` (a metric cache) and ``sample_ids`` to
    :meth:`fit`. Validation data defaults to a seeded tenth of the input.
    """

    def __init__(self, loss="p_loss", epochs=70, batch_size=0, lr=1e-3, lambda0=-1.0,
                 pitch_mode="unknown", hidden=(256, 64), epoch_fraction=0.2, validation_fraction=0.1,
                 seed=0):
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda0 = lambda0
        self.pitch_mode = pitch_mode
        self.hidden = hidden
        self.epoch_fraction = epoch_fraction
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self):
        return TrainConfig(loss=self.loss, batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                           lambda0=self.lambda0, pitch_mode=self.pitch_mode, seed=self.seed,
                           epoch_fraction=self.epoch_fraction, hidden=tuple(self.hidden))

    def fit(self, X, y, sample_ids=None, metrics=None, validation=None):
        X, y = check_X_y(X, y, multi_output=True, dtype=float, y_numeric=True)
        config = self._config()
        if self.loss == "spectral_fd":
            raise ValueError("spectral_fd training needs target features; use encoder.train_spectral_fd")
        y = y.reshape(len(y), -1)
        if y.shape[1] != config.J:
            raise ValueError(f"y has {y.shape[1]} columns, pitch_mode={self.pitch_mode!r} needs {config.J}")
        ids = np.arange(len(X)) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
        if validation is None:
            rng = np.random.default_rng(self.seed)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            va, tr = order[:n_val], order[n_val:]
            train_split, val_split = Split(X[tr], y[tr], ids[tr]), Split(X[va], y[va], ids[va])
        else:
            train_split = Split(X, y, ids)
            val_split = Split(*validation)
        result = train(train_split, val_split, config, metrics=metrics)
        self.weights_ = result.weights
        self.train_log_ = result.log
        self.lambda_trace_ = result.lambda_trace
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict(self.weights_, X)


class LMMatcher(BaseEstimator):
    """Per-sound Levenberg-Marquardt fit; ``predict`` maps signals to parameters.

    ``theta_init`` is the starting point shared by all signals (rows of
    ``init`` in :meth:`predict` override it per signal).
    """

    def __init__(self, theta_init=None, pitch=None, feature_map="jtfs", max_iter=200, fd_step=3e-2,
                 fd_step_min=1e-4, sample_rate=22050):
        self.theta_init = theta_init
        self.pitch = pitch
        self.feature_map = feature_map
        self.max_iter = max_iter
        self.fd_step = fd_step
        self.fd_step_min = fd_step_min
        self.sample_rate = sample_rate

    def fit(self, X=None, y=None):
        self.results_ = []
        return self

    def predict(self, X, init=None):
        X = check_array(X, dtype=float)
        J = 4 if self.pitch is not None else 5
        if init is None:
            base = np.zeros(J) if self.theta_init is None else np.asarray(self.theta_init, dtype=float)
            init = np.tile(base, (len(X), 1))
        init = check_array(init, dtype=float)
        opts = MatchOptions(fd_step=self.fd_step, fd_step_min=self.fd_step_min, max_iter=self.max_iter)
        self.results_ = []
        out = []
        for x, v in zip(X, init):
            th = NormalizedTheta(v, self.pitch) if J == 4 else NormalizedTheta(v)
            res = match(AudioBuffer(x, self.sample_rate), th, self.feature_map, opts)
            self.results_.append(res)
            out.append(res.theta_hat.values)
        return np.array(out)
