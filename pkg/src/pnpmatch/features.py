"""Perceptual feature maps: constant-Q scalogram, multi-scale spectrogram and a
reduced joint time-frequency scattering transform (JTFS).

All wavelets are Morlet-style and defined in the Fourier domain. The
scalogram is computed per filter on a demodulated, cropped band so that the
envelope is exact at a fraction of the cost, then decimated to a common frame
rate. JTFS operates on that scalogram::

    order 1:  U1 * phi_T (time) * phi_F (log-frequency)
    order 2:  |U1 * psi_t (time) * psi_fr (log-frequency, up/down)| * phi_T * phi_F
              |U1 * psi_t * phi_F|            (spin 0)
              |U1 * phi_T * psi_fr|           (spin 0)
"""

from __future__ import annotations

import csv
import functools
import math
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, FormatError
from .ftm import AudioBuffer, _smooth_fade

EPSILON = 1e-3
MSS_WINDOWS = (2048, 1024, 512, 256, 128, 64)
MSS_FLOOR = 1e-7
N_FRAMES = 1024
N_TEMPORAL_OCTAVES = 6
N_FREQUENTIAL_OCTAVES = 5
TOP_FREQUENCY_RATIO = 0.85
# fraction of the signal faded out before analysis
TAIL_FADE = 0.1

_FEATURE_MAGIC = b"PNPF"
_FEATURE_VERSION = 1


@dataclass(frozen=True)
class FilterBankConfig:
    q1: int = 12
    q2: int = 1
    q_fr: int = 1
    octaves: int = 10
    T: float = 3.0
    F: float = 2.0
    epsilon: float = EPSILON
    sample_rate: int = 22050

    def __post_init__(self):
        for name in ("q1", "q2", "q_fr", "octaves", "T", "F", "epsilon", "sample_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_filters(self):
        return self.q1 * self.octaves


@dataclass(frozen=True)
class Scalogram:
    magnitudes: np.ndarray  # (n_filters, n_frames)
    frequencies: np.ndarray  # Hz, descending
    hop: int
    n_signal_frames: int


PATH_DTYPE = np.dtype([
    ("order", "i1"), ("xi1", "f8"), ("xi2", "f8"), ("xi_fr", "f8"),
    ("spin", "i1"), ("time", "f8"),
])


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    paths: np.ndarray | None = None
    feature_map_id: str = ""

    def __len__(self):
        return self.values.size

    @property
    def P(self):
        return self.values.size


def _next_pow2(n):
    return 1 << max(0, int(math.ceil(math.log2(max(n, 1)))))


def morlet_hat(freqs, xi, sigma):
    """Zero-mean Morlet in the Fourier domain, peak ~1 at ``xi``."""
    corr = math.exp(-xi ** 2 / (2 * sigma ** 2))
    return np.exp(-(freqs - xi) ** 2 / (2 * sigma ** 2)) - corr * np.exp(-freqs ** 2 / (2 * sigma ** 2))


def octave_sigma(xi, q):
    """Bandwidth so that neighbours ``2^(1/q)`` apart cross at half maximum."""
    r = 2.0 ** (1.0 / q)
    return xi * (r - 1) / (2 * math.sqrt(2 * math.log(2)))


def first_order_frequencies(config):
    top = TOP_FREQUENCY_RATIO * config.sample_rate / 2
    return top * 2.0 ** (-np.arange(config.n_filters) / config.q1)


def _pad_length(n_samples, config):
    return _next_pow2(max(n_samples, int(math.ceil(config.T * config.sample_rate)), N_FRAMES))


@functools.lru_cache(maxsize=16)
def _first_order_bank(config, n):
    """Per-filter (start bin, cropped response, crop length)."""
    df = config.sample_rate / n
    hop = n // N_FRAMES
    bank = []
    for xi in first_order_frequencies(config):
        sigma = octave_sigma(xi, config.q1)
        width = _next_pow2(int(math.ceil(10 * sigma / df)))
        length = min(max(N_FRAMES, width), n)
        k0 = int(round(xi / df)) - length // 2
        k = np.arange(k0, k0 + length)
        valid = (k >= 0) & (k <= n // 2)
        resp = np.where(valid, 2 * morlet_hat(k * df, xi, sigma), 0.0)
        q = length // N_FRAMES
        # positive Gaussian anti-alias of one output frame, applied before decimation
        t = np.arange(length)
        t = np.minimum(t, length - t).astype(float)
        h = np.exp(-t ** 2 / (2 * float(q) ** 2))
        h_hat = np.fft.rfft(h / h.sum())
        bank.append((k0, resp, valid, length, h_hat))
    return tuple(bank), hop


@functools.lru_cache(maxsize=8)
def _tail_window(n):
    # smooth fade so the truncation instant of a ringing input leaves no click
    w = _smooth_fade(np.arange(n), (1 - TAIL_FADE) * n, n)
    w.flags.writeable = False
    return w


def scalogram(audio, config=None):
    """Constant-Q wavelet modulus at a common frame rate of ``N_FRAMES`` frames."""
    config = config or FilterBankConfig()
    x = np.asarray(audio.samples if isinstance(audio, AudioBuffer) else audio, dtype=float)
    n = _pad_length(x.size, config)
    spectrum = np.fft.rfft(x * _tail_window(x.size), n)
    bank, hop = _first_order_bank(config, n)
    out = np.empty((len(bank), N_FRAMES))
    for i, (k0, resp, valid, length, h_hat) in enumerate(bank):
        band = np.zeros(length, dtype=complex)
        idx = np.arange(k0, k0 + length)
        band[valid] = spectrum[idx[valid]]
        # put bin k0 + length/2 at baseband zero; the modulus ignores the shift
        z = np.fft.ifft(np.fft.ifftshift(band * resp)) * (length / n)
        env = np.abs(z)
        env = np.fft.irfft(np.fft.rfft(env) * h_hat, length)
        out[i] = env[:: length // N_FRAMES]
    np.maximum(out, 0.0, out=out)
    return Scalogram(out, first_order_frequencies(config), hop, int(math.ceil(x.size / hop)))


def log_compress(v, epsilon=EPSILON):
    """Elementwise ``log(1 + v / epsilon)``."""
    values = v.values if isinstance(v, FeatureVector) else np.asarray(v, dtype=float)
    if np.any(values < 0):
        raise ContractError("log_compress requires nonnegative input")
    out = np.log1p(values / epsilon)
    if isinstance(v, FeatureVector):
        return FeatureVector(out, v.paths, v.feature_map_id + "+log")
    return out


def cqt_features(audio, config=None):
    """Encoder input: log-scaled CQT pooled over the signal frames (mean, max)."""
    config = config or FilterBankConfig()
    sc = scalogram(audio, config)
    logc = np.log1p(sc.magnitudes[:, : max(1, sc.n_signal_frames)] / config.epsilon)
    return np.concatenate([logc.mean(axis=1), logc.max(axis=1)])


def _reflect_conv_matrix(n, kernel_hat_fn, pad):
    """Dense operator of a reflect-padded convolution on ``n`` points."""
    m = _next_pow2(n + 2 * pad)
    padded = _reflect_pad_rows(np.eye(n), pad, m)
    freqs = np.fft.fftfreq(m)
    conv = np.fft.ifft(np.fft.fft(padded, axis=0) * kernel_hat_fn(freqs)[:, None], axis=0)
    return conv[pad:pad + n]


@functools.lru_cache(maxsize=16)
def _jtfs_plan(config, n):
    hop = n // N_FRAMES
    fr = config.sample_rate / hop
    n_filters = config.n_filters

    # temporal low-pass phi_T: Gaussian of width T/2, sampled every T/2
    sigma_t = config.T / 2 * fr
    stride_t = max(1, int(round(sigma_t)))
    t_pos = np.arange(0, N_FRAMES, stride_t)
    t = np.arange(N_FRAMES)
    d = (t[:, None] - t_pos[None, :]) % N_FRAMES
    d = np.minimum(d, N_FRAMES - d)
    avg_t = np.exp(-d ** 2 / (2 * sigma_t ** 2))
    avg_t /= avg_t.sum(axis=0, keepdims=True)

    # frequential low-pass phi_F over F octaves, reflect boundary
    f_bins = config.F * config.q1
    sigma_f = f_bins / 2
    stride_f = max(1, int(round(f_bins / 2)))
    pad = min(n_filters - 2, int(math.ceil(3 * sigma_f)))
    lowpass = lambda f: np.exp(-(2 * np.pi * f) ** 2 * sigma_f ** 2 / 2)
    f_pos = np.arange(stride_f // 2, n_filters, stride_f)
    avg_f = _reflect_conv_matrix(n_filters, lowpass, pad).real[f_pos]

    # temporal second-order wavelets, 6 octaves below a quarter of the frame rate
    xi2 = (fr / 4) * 2.0 ** (-np.arange(N_TEMPORAL_OCTAVES) / config.q2)
    omega = np.fft.fftfreq(N_FRAMES, d=1 / fr)
    psi_t = np.stack([np.where(omega >= 0, morlet_hat(omega, xi, octave_sigma(xi, config.q2)), 0.0)
                      for xi in xi2])
    # frequential wavelets in cycles per bin
    xi_fr = 0.4 * 2.0 ** (-np.arange(N_FREQUENTIAL_OCTAVES) / config.q_fr)
    # reflect margin of three time-domain widths of the widest frequential wavelet
    pad_fr = min(n_filters - 2, int(math.ceil(3 / (2 * np.pi * octave_sigma(xi_fr[-1], config.q_fr)))))
    m_fr = _next_pow2(n_filters + 2 * pad_fr)
    nu = np.fft.fftfreq(m_fr)
    psi_fr = []
    for xi in xi_fr:
        s = octave_sigma(xi, config.q_fr)
        up = np.where(nu >= 0, morlet_hat(nu, xi, s), 0.0)
        down = np.where(nu <= 0, morlet_hat(-nu, xi, s), 0.0)
        psi_fr.append((up, down))
    # each temporal band is processed on a grid just fine enough for its modulus
    crops = []
    for xi, psi in zip(xi2, psi_t):
        length = int(min(N_FRAMES, max(64, _next_pow2(int(math.ceil(8 * xi / fr * N_FRAMES))))))
        step = N_FRAMES // length
        d = (np.arange(length)[:, None] * step - t_pos[None, :]) % N_FRAMES
        d = np.minimum(d, N_FRAMES - d)
        w = np.exp(-d ** 2 / (2 * sigma_t ** 2))
        psi_c = np.zeros(length)
        psi_c[: length // 2] = psi[: length // 2]
        crops.append((length, psi_c, w / w.sum(axis=0, keepdims=True)))
    return dict(fr=fr, avg_t=avg_t, t_pos=t_pos, avg_f=avg_f, f_pos=f_pos, xi2=xi2, crops=crops,
                xi_fr=xi_fr, pad_fr=pad_fr, m_fr=m_fr, psi_fr=psi_fr,
                fr_op=_fr_operator([f for pair in psi_fr for f in pair], n_filters, pad_fr, m_fr),
                fr_up_op=_fr_operator([up for up, _ in psi_fr], n_filters, pad_fr, m_fr))


def _reflect_pad_rows(a, pad, m):
    """Reflect ``pad`` rows on both ends, then zero-fill up to ``m`` rows."""
    n = a.shape[0]
    out = np.zeros((m,) + a.shape[1:], dtype=a.dtype)
    out[:pad] = a[1:pad + 1][::-1]
    out[pad:pad + n] = a
    out[pad + n:n + 2 * pad] = a[n - 1 - pad:n - 1][::-1]
    return out


def _fr_operator(filters, n, pad, m):
    """Stacked dense operators of reflect-padded log-frequency convolutions.

    Row block ``k`` maps ``n`` filter channels through ``filters[k]``; the
    dense form turns every convolution of a scalogram into one matrix product.
    """
    padded = np.fft.fft(_reflect_pad_rows(np.eye(n), pad, m), axis=0)
    ops = np.fft.ifft(padded[None] * np.stack(filters)[:, :, None], axis=1)[:, pad:pad + n]
    return ops.reshape(-1, n)


def _fr_convolve(y, op, n_filters):
    """Apply a stacked operator to ``(n, n_time)``; returns ``(n_filters, n, n_time)``."""
    return (op @ y).reshape(n_filters, y.shape[0], -1)


def jtfs(audio, config=None, with_paths=True):
    """Reduced joint time-frequency scattering, pre-log compression."""
    config = config or FilterBankConfig()
    x = np.asarray(audio.samples if isinstance(audio, AudioBuffer) else audio, dtype=float)
    n = _pad_length(x.size, config)
    plan = _jtfs_plan(config, n)
    sc = scalogram(x, config)
    u1 = sc.magnitudes
    avg_t, avg_f = plan["avg_t"], plan["avg_f"]

    blocks = [avg_f @ u1 @ avg_t]
    u1_hat = np.fft.fft(u1, axis=1)
    n_fr = len(plan["xi_fr"])
    for length, psi, avg in plan["crops"]:
        # analytic band: only the first length/2 bins carry energy
        band = np.zeros((u1.shape[0], length), dtype=complex)
        band[:, : length // 2] = u1_hat[:, : length // 2] * psi[None, : length // 2]
        y = np.fft.ifft(band, axis=1) * (length / N_FRAMES)
        z = np.abs(_fr_convolve(y, plan["fr_op"], 2 * n_fr))
        for k in range(len(plan["xi_fr"])):
            blocks.append(avg_f @ z[2 * k] @ avg)
            blocks.append(avg_f @ z[2 * k + 1] @ avg)
        # psi_t x phi_F: frequential low-pass instead of a frequential wavelet
        blocks.append(avg_f @ np.abs(y) @ avg)
    smooth = u1 @ avg_t
    z = np.abs(_fr_convolve(smooth, plan["fr_up_op"], n_fr))
    for k in range(len(plan["xi_fr"])):
        blocks.append(avg_f @ z[k])
    values = np.maximum(np.concatenate([b.ravel() for b in blocks]), 0.0)
    paths = _jtfs_paths(config, plan, sc.frequencies) if with_paths else None
    return FeatureVector(values, paths, "jtfs")


def _jtfs_paths(config, plan, freqs):
    centers = freqs[plan["f_pos"]]
    times = plan["t_pos"] / plan["fr"]
    grid = [(c, t) for c in centers for t in times]
    rows = [(1, c, 0.0, 0.0, 0, t) for c, t in grid]
    for x2 in plan["xi2"]:
        for xf in plan["xi_fr"]:
            rows += [(2, c, x2, xf, 1, t) for c, t in grid]
            rows += [(2, c, x2, xf, -1, t) for c, t in grid]
        rows += [(2, c, x2, 0.0, 0, t) for c, t in grid]
    for xf in plan["xi_fr"]:
        rows += [(2, c, 0.0, xf, 0, t) for c, t in grid]
    return np.array(rows, dtype=PATH_DTYPE)


def phi_jtfs(audio, config=None):
    """Log-compressed JTFS, the feature map used for metrics and evaluation."""
    config = config or FilterBankConfig()
    return log_compress(jtfs(audio, config, with_paths=False).values, config.epsilon)


def _frames(x, n_fft):
    hop = n_fft // 4
    if x.size < n_fft:
        x = np.pad(x, (0, n_fft - x.size))
    n = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


@functools.lru_cache(maxsize=None)
def _hann(n):
    return np.hanning(n + 1)[:-1]


def mss(audio, window_sizes=MSS_WINDOWS, with_paths=False):
    """Multi-scale magnitude and log-magnitude spectrograms, flattened."""
    x = np.asarray(audio.samples if isinstance(audio, AudioBuffer) else audio, dtype=float)
    if x.size == 0:
        raise ContractError("mss requires a non-empty signal")
    mags, logs, rows = [], [], []
    for n_fft in window_sizes:
        mag = np.abs(np.fft.rfft(_frames(x, n_fft) * _hann(n_fft), axis=1))
        mags.append(mag.ravel())
        logs.append(np.log(mag + MSS_FLOOR).ravel())
        if with_paths:
            rows.append((n_fft, mag.shape))
    values = np.concatenate(mags + logs)
    paths = None
    if with_paths:
        recs = []
        for kind in (0, 1):
            for n_fft, (nt, nb) in rows:
                fk = np.fft.rfftfreq(n_fft)
                for i in range(nt):
                    for b in range(nb):
                        recs.append((kind, fk[b], float(n_fft), 0.0, 0, i * n_fft // 4))
        paths = np.array(recs, dtype=PATH_DTYPE)
    return FeatureVector(values, paths, "mss")


def mss_distance(a, b, window_sizes=MSS_WINDOWS):
    """Mean absolute multi-scale spectral error (linear plus log magnitude)."""
    total = 0.0
    xa = np.asarray(a.samples if isinstance(a, AudioBuffer) else a, dtype=float)
    xb = np.asarray(b.samples if isinstance(b, AudioBuffer) else b, dtype=float)
    for n_fft in window_sizes:
        ma = np.abs(np.fft.rfft(_frames(xa, n_fft) * _hann(n_fft), axis=1))
        mb = np.abs(np.fft.rfft(_frames(xb, n_fft) * _hann(n_fft), axis=1))
        total += np.mean(np.abs(ma - mb)) + np.mean(np.abs(np.log(ma + MSS_FLOOR) - np.log(mb + MSS_FLOOR)))
    return total / len(window_sizes)


FEATURE_MAPS = {
    "jtfs": phi_jtfs,
    "mss": lambda audio: mss(audio).values,
}


def get_feature_map(name):
    try:
        return FEATURE_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown feature map {name!r}; expected one of {sorted(FEATURE_MAPS)}")


def write_feature_vector(path, v):
    fid = v.feature_map_id.encode()
    with open(path, "wb") as f:
        f.write(_FEATURE_MAGIC)
        f.write(struct.pack("<IH", _FEATURE_VERSION, len(fid)))
        f.write(fid)
        f.write(struct.pack("<Q", v.values.size))
        f.write(np.ascontiguousarray(v.values, dtype="<f8").tobytes())


def read_feature_vector(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 10:
        raise FormatError(f"{path}: truncated header")
    version, n_id = struct.unpack_from("<IH", data, 4)
    if version != _FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 10 + n_id
    if len(data) < off + 8:
        raise FormatError(f"{path}: truncated header")
    fid = data[10:off].decode()
    (p,) = struct.unpack_from("<Q", data, off)
    body = data[off + 8:]
    if len(body) != 8 * p:
        raise FormatError(f"{path}: expected {p} values, found {len(body) // 8}")
    return FeatureVector(np.frombuffer(body, dtype="<f8").copy(), None, fid)


def write_feature_csv(path, v):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if v.paths is None:
            w.writerow(["index", "value"])
            for i, x in enumerate(v.values):
                w.writerow([i, repr(float(x))])
            return
        w.writerow(["index", *PATH_DTYPE.names, "value"])
        for i, (row, x) in enumerate(zip(v.paths, v.values)):
            w.writerow([i, *(r.item() for r in row), repr(float(x))])
