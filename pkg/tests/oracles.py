"""Independent reference computations used by several test modules."""

import numpy as np


def fundamental_hz(x, sample_rate, fmin=20.0, pad=8, prominence=0.1):
    """Lowest spectral peak above ``fmin`` reaching ``prominence`` of the largest one.

    Hann window with ``pad``-fold zero padding, which keeps scalloping well
    under 1% so that near-equal partials are ranked by their true height.
    """
    X = np.abs(np.fft.rfft(x * np.hanning(x.size), pad * x.size))
    f = np.fft.rfftfreq(pad * x.size, 1.0 / sample_rate)
    keep = f >= fmin
    X, f = X[keep], f[keep]
    peaks = np.flatnonzero((X[1:-1] >= X[:-2]) & (X[1:-1] > X[2:])) + 1
    strong = peaks[X[peaks] >= prominence * X[peaks].max()]
    return f[strong[0]]


def fundamental_decay(x, f0, sample_rate, rtol=1e-9):
    """Decay rate (1/s) of the damped sinusoid nearest ``f0`` in ``x``.

    The signal is band-passed with a Gaussian one semitone wide, moved to
    baseband and decimated; a matrix-pencil fit then separates the damped
    exponentials in the band, which may lie far closer together than any
    filter could resolve. Filter transients are cut before fitting.
    """
    n = x.size
    N = 2 * n
    F = np.fft.fft(x, N)
    f = np.fft.fftfreq(N, 1.0 / sample_rate)
    sf = f0 * (2 ** (1 / 12) - 1)
    st = 1.0 / (2 * np.pi * sf)
    t = np.arange(N) / sample_rate
    a = np.fft.ifft(F * np.exp(-0.5 * ((f - f0) / sf) ** 2)) * np.exp(-2j * np.pi * f0 * t)
    stride = max(1, int(sample_rate / (20 * sf)))
    window = (t >= 8 * st) & (t <= t[n - 1] - 8 * st)
    y = a[window][::stride]
    dt = stride / sample_rate
    L = len(y) // 3
    Y = y[np.arange(L + 1)[None, :] + np.arange(len(y) - L)[:, None]]
    _, s, vt = np.linalg.svd(Y, full_matrices=False)
    k = int(np.sum(s > rtol * s[0]))
    V = vt[:k].conj().T
    z = np.linalg.eigvals(np.linalg.pinv(V[:-1]) @ V[1:])
    freq = np.angle(z) / (2 * np.pi * dt)
    i = np.argmin(np.abs(freq))
    return -np.log(np.abs(z[i])) / dt


def taylor_slope(model, theta, direction, M, norms=np.logspace(-4, -2, 7)):
    """Remainders |‖Δφ‖² − Δθᵀ M Δθ| along ``direction`` and their log-log slope."""
    f0 = model(theta)
    rem = []
    for s in norms:
        d = model(theta + s * direction) - f0
        rem.append(abs(d @ d - s * s * direction @ M @ direction))
    rem = np.array(rem)
    return np.polyfit(np.log(norms), np.log(rem), 1)[0], rem


def pooled_slope(norms, remainders):
    """Common log-log slope across trials with a free intercept per trial."""
    x = np.log(np.asarray(norms))
    xs, ys = [], []
    for r in remainders:
        y = np.log(np.asarray(r))
        xs.append(x - x.mean())
        ys.append(y - y.mean())
    xs, ys = np.concatenate(xs), np.concatenate(ys)
    return float(xs @ ys / (xs @ xs))


def random_psd(rng, J, rank=None):
    rank = J if rank is None else rank
    A = rng.normal(size=(J, rank)) * np.exp(rng.uniform(-3, 3, rank))
    return A @ A.T
