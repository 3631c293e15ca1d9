"""MLP encoder from pooled log-CQT features to normalized drum parameters.

The network is ``input -> 256 -> 64 -> J`` with ReLU hidden layers and a
batch-normalized tanh head, trained with Adam under P-loss, damped PNP loss or
(slowly) the spectral loss through finite-difference Jacobians. Gradients are
computed by hand; there is no autodiff dependency.
"""

from __future__ import annotations

import csv
import math
import struct
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .exceptions import ContractError, FormatError
from .losses import batch_pnp
from .metric import FD_STEP, composed_map, jacobian_fd
from .ftm import NormalizedTheta

LOSS_KINDS = ("p_loss", "pnp", "spectral_fd")
PITCH_MODES = ("unknown", "known")
DECAY = 5.0

_WEIGHTS_MAGIC = b"PNPW"
_WEIGHTS_VERSION = 1


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss: str = "p_loss"
    batch_size: int = 0  # 0 picks 256, or 64 for spectral_fd
    epochs: int = 70
    lr: float = 1e-3
    lambda0: float = -1.0  # negative picks the largest cached eigenvalue
    decay: float = DECAY
    pitch_mode: str = "unknown"
    seed: int = 0
    epoch_fraction: float = 0.2
    hidden: tuple = (256, 64)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    fd_step: float = FD_STEP

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.pitch_mode not in PITCH_MODES:
            raise ValueError(f"pitch_mode must be one of {PITCH_MODES}, got {self.pitch_mode!r}")
        if self.batch_size < 0 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size, epochs must be >= 0 and lr > 0")
        if not 0 < self.epoch_fraction <= 1:
            raise ValueError("epoch_fraction must lie in (0, 1]")
        if self.decay <= 1:
            raise ValueError("decay factor must exceed 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def J(self):
        return 4 if self.pitch_mode == "known" else 5

    @property
    def effective_batch_size(self):
        if self.batch_size:
            return self.batch_size
        return 64 if self.loss == "spectral_fd" else 256

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"config line {n}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise FormatError(f"config line {n}: unknown key {key!r}")
            kw[key] = _parse_value(cls.__dataclass_fields__[key].default, value)
        return cls(**kw)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())


def _parse_value(default, value):
    if isinstance(default, tuple):
        return tuple(int(x) for x in value.split(",") if x.strip())
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    return type(default)(value)


# -- lambda schedule ---------------------------------------------------------

@dataclass(frozen=True)
class LambdaSchedule:
    lam: float
    best: float = math.inf
    factor: float = DECAY

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


def update_lambda(schedule, epoch_val_loss):
    """Divide lambda by the decay factor when validation improves, else keep it.

    The first loss only sets the reference: there is nothing yet to improve on.
    """
    if math.isinf(schedule.best):
        return replace(schedule, best=float(epoch_val_loss))
    if epoch_val_loss < schedule.best:
        return replace(schedule, lam=schedule.lam / schedule.factor, best=float(epoch_val_loss))
    return schedule


def lambda_trace(lam0, val_losses, factor=DECAY):
    """Lambda after each epoch's update for a sequence of validation losses."""
    s = LambdaSchedule(lam0, factor=factor)
    trace = []
    for v in val_losses:
        s = update_lambda(s, v)
        trace.append(s.lam)
    return trace


# -- weights -----------------------------------------------------------------

@dataclass
class EncoderWeights:
    W: list
    b: list
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @property
    def sizes(self):
        return [self.W[0].shape[0]] + [w.shape[1] for w in self.W]

    @property
    def J(self):
        return self.W[-1].shape[1]

    @classmethod
    def init(cls, sizes, seed=0):
        """Fan-in scaled uniform initialization (as in common MLP defaults)."""
        rng = np.random.default_rng(seed)
        W, b = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            W.append(rng.uniform(-bound, bound, (n_in, n_out)))
            b.append(rng.uniform(-bound, bound, n_out))
        J = sizes[-1]
        return cls(W, b, np.ones(J), np.zeros(J), np.zeros(J), np.ones(J))

    def params(self):
        """Trainable arrays, in a fixed order shared with gradients."""
        return [*self.W, *self.b, self.gamma, self.beta]

    def copy(self):
        return EncoderWeights([w.copy() for w in self.W], [x.copy() for x in self.b], self.gamma.copy(),
                              self.beta.copy(), self.running_mean.copy(), self.running_var.copy())

    def check(self):
        sizes = self.sizes
        for i, (w, bb) in enumerate(zip(self.W, self.b)):
            if w.shape != (sizes[i], sizes[i + 1]) or bb.shape != (sizes[i + 1],):
                raise ContractError(f"layer {i} shapes do not chain")
        for a in [*self.params(), self.running_mean, self.running_var]:
            if not np.all(np.isfinite(a)):
                raise ContractError("non-finite weights")
        return self

    def save(self, path):
        sizes = self.sizes
        with open(path, "wb") as f:
            f.write(_WEIGHTS_MAGIC)
            f.write(struct.pack("<II", _WEIGHTS_VERSION, len(sizes)))
            f.write(struct.pack(f"<{len(sizes)}I", *sizes))
            for a in [*self.params(), self.running_mean, self.running_var]:
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != _WEIGHTS_MAGIC:
            raise FormatError(f"{path}: magic mismatch ({data[:4]!r})")
        if len(data) < 12:
            raise FormatError(f"{path}: truncated header")
        version, n = struct.unpack_from("<II", data, 4)
        if version != _WEIGHTS_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if n < 2 or len(data) < 12 + 4 * n:
            raise FormatError(f"{path}: bad layer count {n}")
        sizes = struct.unpack_from(f"<{n}I", data, 12)
        shapes = [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        shapes += [(b,) for b in sizes[1:]] + [(sizes[-1],)] * 4
        need = sum(int(np.prod(s)) for s in shapes)
        off = 12 + 4 * n
        if len(data) != off + 8 * need:
            raise FormatError(f"{path}: expected {need} weights, file holds {(len(data) - off) / 8:g}")
        flat = np.frombuffer(data, dtype="<f8", offset=off).astype(float)
        arrays, p = [], 0
        for s in shapes:
            k = int(np.prod(s))
            arrays.append(flat[p:p + k].reshape(s))
            p += k
        L = n - 1
        return cls(arrays[:L], arrays[L:2 * L], *arrays[2 * L:]).check()


# -- forward / backward ------------------------------------------------------

def forward(X, weights, training=False, eps=1e-5):
    """Predict normalized parameters for a batch of feature rows.

    In training mode the head normalizes with batch statistics; otherwise it
    uses the running statistics. Returns ``(y, cache)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != weights.sizes[0]:
        raise ContractError(f"expected features of shape (B, {weights.sizes[0]}), got {X.shape}")
    acts = [X]
    h = X
    for w, b in zip(weights.W[:-1], weights.b[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    z = h @ weights.W[-1] + weights.b[-1]
    if training:
        mu, var = z.mean(axis=0), z.var(axis=0)
    else:
        mu, var = weights.running_mean, weights.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (z - mu) * inv_std
    y = np.tanh(weights.gamma * xhat + weights.beta)
    cache = {"acts": acts, "xhat": xhat, "inv_std": inv_std, "y": y, "training": training,
             "mu": mu, "var": var}
    return y, cache


def backward(cache, dy, weights):
    """Gradients of a scalar loss given ``dy = dL/dy``, ordered like ``params()``."""
    y, xhat, inv_std = cache["y"], cache["xhat"], cache["inv_std"]
    du = dy * (1.0 - y**2)
    dgamma = np.sum(du * xhat, axis=0)
    dbeta = np.sum(du, axis=0)
    dxhat = du * weights.gamma
    if cache["training"]:
        B = dxhat.shape[0]
        dz = inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    else:
        dz = dxhat * inv_std
    acts = cache["acts"]
    L = len(weights.W)
    dW, db = [None] * L, [None] * L
    for i in range(L - 1, -1, -1):
        dW[i] = acts[i].T @ dz
        db[i] = dz.sum(axis=0)
        if i:
            dz = (dz @ weights.W[i].T) * (acts[i] > 0)
    return [*dW, *db, dgamma, dbeta]


def update_running_stats(weights, cache, momentum=0.1):
    B = cache["acts"][0].shape[0]
    unbiased = cache["var"] * B / max(B - 1, 1)
    weights.running_mean = (1 - momentum) * weights.running_mean + momentum * cache["mu"]
    weights.running_var = (1 - momentum) * weights.running_var + momentum * unbiased


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- losses at the head ------------------------------------------------------

def head_loss(theta_hat, theta, kind, M=None, lam=0.0):
    """Batch-mean loss and ``dL/dtheta_hat`` for P-loss or PNP."""
    if kind == "p_loss":
        value, g = batch_pnp(theta_hat, theta, None, 0.0)
    elif kind == "pnp":
        if M is None:
            raise ContractError("pnp loss requires metric matrices")
        value, g = batch_pnp(theta_hat, theta, M, lam)
    else:
        raise ValueError(f"head_loss does not handle {kind!r}")
    return value, g / max(len(theta_hat), 1)


def spectral_fd_head(theta_hat, targets, pitch=None, fd_step=FD_STEP, feature_map="jtfs"):
    """Batch-mean spectral loss and its gradient through FD Jacobians.

    ``targets`` holds the feature vectors of the reference sounds, one row per
    sample. Each sample costs ``2J + 1`` renders and feature evaluations.
    """
    B, J = theta_hat.shape
    grads = np.zeros_like(theta_hat)
    total = 0.0
    for i in range(B):
        pit = None if pitch is None else float(pitch[i])
        model = composed_map(feature_map, pitch=pit)
        th = np.clip(theta_hat[i], -1.0, 1.0)
        r = model(th) - targets[i]
        jac = jacobian_fd(NormalizedTheta(th, pit) if J == 4 else NormalizedTheta(th), h=fd_step, model=model)
        total += 0.5 * float(r @ r)
        grads[i] = jac.entries.T @ r
    return total / B, grads / B


# -- training ----------------------------------------------------------------

@dataclass
class Split:
    """Features, targets and ids of one dataset split.

    ``pitch`` holds the known normalized pitch per sample (J=4 only) and
    ``targets`` the reference feature vectors used by ``spectral_fd``.
    """

    X: np.ndarray
    theta: np.ndarray
    ids: np.ndarray
    pitch: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.X) == len(self.theta) == len(self.ids)):
            raise ContractError("split arrays must have equal length")

    def __len__(self):
        return len(self.ids)

    def take(self, idx):
        opt = lambda a: None if a is None else a[idx]  # noqa: E731
        return Split(self.X[idx], self.theta[idx], self.ids[idx], opt(self.pitch), opt(self.targets))


@dataclass
class TrainResult:
    weights: EncoderWeights
    log: list = field(default_factory=list)  # dict rows: epoch, train_loss, val_loss, lam, wall_clock
    lambda_trace: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    best_epoch: int = -1

    def write_log(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "lambda", "wall_clock"])
            for row in self.log:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lam"]),
                            f"{row['wall_clock']:.6f}"])


def _batches(n, size, rng):
    order = rng.permutation(n)
    out = [order[i:i + size] for i in range(0, n, size)]
    # a batch of one has zero batch variance; fold it into its neighbour
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _metrics_for(metrics, ids):
    if metrics is None:
        return None
    if isinstance(metrics, np.ndarray):
        return metrics
    return metrics.stacked(ids)


def evaluate_loss(weights, split, kind, metrics=None, lam=0.0, config=None):
    """Validation loss of ``kind`` in inference mode."""
    if len(split) == 0:
        return 0.0
    eps = config.bn_eps if config else 1e-5
    y, _ = forward(split.X, weights, training=False, eps=eps)
    if kind == "spectral_fd":
        r = np.stack([composed_map("jtfs", pitch=None if split.pitch is None else float(split.pitch[i]))(y[i])
                      for i in range(len(split))]) - split.targets
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))
    value, _ = head_loss(y, split.theta, kind, _metrics_for(metrics, split.ids), lam)
    return value


def train_step(weights, opt, batch, config, M=None, lam=0.0):
    """One optimizer step on ``batch``; returns the batch-mean loss."""
    y, cache = forward(batch.X, weights, training=True, eps=config.bn_eps)
    if config.loss == "spectral_fd":
        if batch.targets is None:
            raise ContractError("spectral_fd training needs target feature vectors")
        value, dy = spectral_fd_head(y, batch.targets, batch.pitch, config.fd_step)
    else:
        value, dy = head_loss(y, batch.theta, config.loss, M, lam)
    grads = backward(cache, dy, weights)
    opt.step(weights.params(), grads)
    update_running_stats(weights, cache, config.bn_momentum)
    return value


def train(train_split, val_split, config, metrics=None, weights=None, progress=None):
    """Fit the encoder and return the best-validation weights with logs.

    ``metrics`` is a metric cache (anything with ``stacked(ids)`` and
    ``max_eigenvalue()``) and is required for ``loss="pnp"``. Metric matrices
    are gathered once up front so a PNP step costs one batched product more
    than a P-loss step.
    """
    J = train_split.theta.shape[1]
    if J != config.J:
        raise ContractError(f"targets have J={J} but pitch_mode={config.pitch_mode!r} implies J={config.J}")
    rng = np.random.default_rng(config.seed)
    if weights is None:
        weights = EncoderWeights.init([train_split.X.shape[1], *config.hidden, J], seed=config.seed)
    opt = Adam(weights.params(), lr=config.lr)

    M_train = M_val = None
    lam = 0.0
    if config.loss == "pnp":
        if metrics is None:
            raise ContractError("pnp training requires a metric cache")
        M_train = _metrics_for(metrics, train_split.ids)
        M_val = _metrics_for(metrics, val_split.ids)
        lam = config.lambda0 if config.lambda0 >= 0 else metrics.max_eigenvalue()
    schedule = LambdaSchedule(lam, factor=config.decay)

    result = TrainResult(weights)
    best_val, best_weights = math.inf, weights.copy()
    n = len(train_split)
    n_epoch = max(2, int(round(config.epoch_fraction * n))) if n > 1 else n
    bs = config.effective_batch_size
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        subset = rng.choice(n, size=min(n_epoch, n), replace=False)
        total, count = 0.0, 0
        for idx in _batches(len(subset), bs, rng):
            rows = subset[idx]
            s0 = time.perf_counter()
            value = train_step(weights, opt, train_split.take(rows), config,
                               None if M_train is None else M_train[rows], schedule.lam)
            result.step_times.append(time.perf_counter() - s0)
            total += value * len(rows)
            count += len(rows)
        lam_used = schedule.lam
        val = evaluate_loss(weights, val_split, config.loss, M_val, lam_used, config)
        if val < best_val:
            best_val, best_weights = val, weights.copy()
            result.best_epoch = epoch
        if config.loss == "pnp":
            schedule = update_lambda(schedule, val)
        result.lambda_trace.append(schedule.lam)
        row = {"epoch": epoch, "train_loss": total / max(count, 1), "val_loss": val, "lam": lam_used,
               "wall_clock": time.perf_counter() - t0}
        result.log.append(row)
        if progress:
            progress(row)
    result.weights = best_weights
    return result


def train_spectral_fd(train_split, val_split, config, weights=None, progress=None):
    """Reference spectral-loss training with FD Jacobians at every step.

    Expensive: every sample of every step renders ``2J + 1`` sounds. Intended
    for small datasets and timing comparisons only.
    """
    if config.loss != "spectral_fd":
        config = replace(config, loss="spectral_fd")
    return train(train_split, val_split, config, weights=weights, progress=progress)


def predict(weights, X, eps=1e-5):
    y, _ = forward(X, weights, training=False, eps=eps)
    return y
