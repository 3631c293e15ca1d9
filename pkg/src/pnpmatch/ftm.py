"""Closed-form modal synthesis of a damped stiff rectangular membrane.

The drum is described by five perceptually aligned shape parameters::

    (log omega1, tau1, log p, log D, alpha)

``omega1`` is the fundamental frequency in Hz, ``tau1`` the decay time of the
fundamental in seconds, ``p`` the share of frequency-dependent damping, ``D``
the share of stiffness in the squared modal frequencies and ``alpha`` the
aspect ratio of the rectangle. Shape parameters are mapped to the PDE
coefficients ``(S, c, d1, d3, alpha)`` of::

    X_tt - c^2 lap(X) + S^4 lap^2(X) + d/dt (d1 X + d3 lap(X)) = 0

on an ``l x l*alpha`` rectangle (``l = 1``) with clamped edges. Each mode
``(m1, m2)`` has spatial eigenvalue ``Gamma = pi^2 m1^2 + pi^2 m2^2 / alpha^2``,
angular frequency ``omega_m`` and decay ``sigma_m``::

    omega_m^2 = (S^4 - d3^2/4) Gamma^2 + (c^2 + d1 d3 / 2) Gamma - d1^2 / 4
    sigma_m   = d3 Gamma / 2 - d1 / 2

The shape-to-PDE mapping used here is closed form. With
``r = Gamma / Gamma11`` and ``W = 2 pi omega1`` it gives::

    sigma_m   = -(1 - p + p r) / tau1
    omega_m^2 = W^2 (D r^2 + (1 - D) r) + (r - (1 - p + p r)^2) / tau1^2

so mode (1, 1) rings at exactly ``omega1`` Hz and decays at exactly
``1 / tau1``.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InfeasibleParameterError, RangeError

SAMPLE_RATE = 22050
N_SAMPLES = 2 ** 16
DURATION = N_SAMPLES / SAMPLE_RATE
MODE_LIMIT = 4
EXCITATION = 0.03
STRIKE = 0.4
# modes fade out smoothly between these fractions of Nyquist
TAPER_START = 0.9

PARAM_NAMES = ("log_omega1", "tau1", "log_p", "log_D", "alpha")

# physical ranges; log-scaled components are mapped on the log of the bounds
PHYSICAL_RANGES = {
    "omega1": (40.0, 1000.0),
    "tau1": (0.4, 3.0),
    "p": (1e-5, 0.2),
    "D": (1e-5, 0.3),
    "alpha": (1e-5, 1.0),
}

_BOUNDS = np.array([
    (math.log(40.0), math.log(1000.0)),
    (0.4, 3.0),
    (math.log(1e-5), math.log(0.2)),
    (math.log(1e-5), math.log(0.3)),
    (1e-5, 1.0),
])
_LO = _BOUNDS[:, 0]
_SPAN = _BOUNDS[:, 1] - _BOUNDS[:, 0]

_RANGE_RTOL = 1e-9


@dataclass(frozen=True)
class ShapeParams:
    """Physically interpretable drum parameters (``omega1`` in Hz)."""

    omega1: float
    tau1: float
    p: float
    D: float
    alpha: float

    @property
    def log_omega1(self):
        return math.log(self.omega1)

    @property
    def log_p(self):
        return math.log(self.p)

    @property
    def log_D(self):
        return math.log(self.D)

    def as_internal(self):
        """Return ``(log omega1, tau1, log p, log D, alpha)`` as an array."""
        return np.array([self.log_omega1, self.tau1, self.log_p, self.log_D, self.alpha])

    @classmethod
    def from_internal(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(omega1=math.exp(v[0]), tau1=float(v[1]), p=math.exp(v[2]),
                   D=math.exp(v[3]), alpha=float(v[4]))

    def check(self):
        for name, (lo, hi) in PHYSICAL_RANGES.items():
            value = getattr(self, name)
            if not np.isfinite(value) or value < lo * (1 - _RANGE_RTOL) or value > hi * (1 + _RANGE_RTOL):
                raise RangeError(f"{name}={value!r} outside [{lo}, {hi}]", component=name)
        return self


@dataclass(frozen=True)
class NormalizedTheta:
    """A point of the normalized search cube ``[-1, 1]^J``.

    With ``J = 5`` the vector holds every shape parameter. With ``J = 4`` the
    pitch is known: ``values`` holds ``(tau1, log p, log D, alpha)`` and
    ``pitch`` carries the fixed normalized ``log omega1``.
    """

    values: np.ndarray
    pitch: float | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", v)
        if v.size == 4 and self.pitch is None:
            raise RangeError("J=4 theta requires a known pitch", component="log_omega1")
        if v.size not in (4, 5):
            raise RangeError(f"theta must have 4 or 5 components, got {v.size}")

    @property
    def J(self):
        return self.values.size

    @property
    def pitch_known(self):
        return self.values.size == 4

    def full(self):
        """Five-component normalized vector."""
        if self.values.size == 5:
            return self.values.copy()
        return np.concatenate([[float(self.pitch)], self.values])

    def replace(self, values):
        return NormalizedTheta(values, self.pitch if self.pitch_known else None)

    @classmethod
    def from_full(cls, full, pitch_known=False):
        full = np.asarray(full, dtype=float)
        if pitch_known:
            return cls(full[1:], pitch=float(full[0]))
        return cls(full)


@dataclass(frozen=True)
class PdeCoeffs:
    S: float
    c: float
    d1: float
    d3: float
    alpha: float
    l: float = 1.0

    def __post_init__(self):
        if self.d1 < 0 or self.d3 > 0:
            raise InfeasibleParameterError(
                f"damping must satisfy d1 >= 0 and d3 <= 0 (d1={self.d1}, d3={self.d3})")


@dataclass(frozen=True)
class ModeTable:
    m1: np.ndarray
    m2: np.ndarray
    omega: np.ndarray
    sigma: np.ndarray
    gain: np.ndarray
    mode_limit: int
    n_dropped_nyquist: int = 0
    n_dropped_unstable: int = 0
    strike_point: tuple = field(default=(0.4, 0.4))

    def __len__(self):
        return self.omega.size


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


def check_normalized(values, name="theta"):
    values = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~np.isfinite(values) | (np.abs(values) > 1 + _RANGE_RTOL))
    if bad.size:
        i = int(bad[0])
        raise RangeError(f"{name}[{i}]={values[i]!r} outside [-1, 1]", component=i)
    return np.clip(values, -1.0, 1.0)


def normalize(shape, pitch_known=False):
    """Map shape parameters onto the normalized cube (affine per component)."""
    shape.check()
    full = 2.0 * (shape.as_internal() - _LO) / _SPAN - 1.0
    full = np.clip(full, -1.0, 1.0)
    return NormalizedTheta.from_full(full, pitch_known=pitch_known)


def denormalize(theta):
    if not isinstance(theta, NormalizedTheta):
        theta = NormalizedTheta(theta)
    full = check_normalized(theta.full())
    return ShapeParams.from_internal(_LO + (full + 1.0) * 0.5 * _SPAN)


def gamma(m1, m2, alpha, l=1.0):
    """Spatial eigenvalue of mode ``(m1, m2)`` on an ``l x l*alpha`` rectangle."""
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    return np.pi ** 2 * m1 ** 2 / l ** 2 + np.pi ** 2 * m2 ** 2 / (l * alpha) ** 2


def shape_to_pde(shape):
    shape.check()
    g11 = float(gamma(1, 1, shape.alpha))
    w = 2 * np.pi * shape.omega1
    d1 = 2 * (1 - shape.p) / shape.tau1
    d3 = -2 * shape.p / (shape.tau1 * g11)
    s4 = shape.D * w ** 2 / g11 ** 2
    c2 = (w ** 2 * (1 - shape.D) + 1 / shape.tau1 ** 2) / g11
    if c2 < 0:
        raise InfeasibleParameterError(f"derived c^2={c2} < 0 for {shape}")
    return PdeCoeffs(S=s4 ** 0.25, c=math.sqrt(c2), d1=d1, d3=d3, alpha=shape.alpha)


def pde_to_shape(pde):
    """Analytical inverse of :func:`shape_to_pde` (``l = 1``)."""
    g11 = float(gamma(1, 1, pde.alpha, pde.l))
    tau1 = 2.0 / (pde.d1 - pde.d3 * g11)
    p = -pde.d3 * g11 * tau1 / 2
    s4g = pde.S ** 4 * g11 ** 2
    w2 = s4g + pde.c ** 2 * g11 - 1 / tau1 ** 2
    return ShapeParams(omega1=math.sqrt(w2) / (2 * np.pi), tau1=tau1, p=p, D=s4g / w2,
                       alpha=pde.alpha)


def _smooth_fade(x, start, stop):
    """C-infinity step from 1 (x <= start) down to 0 (x >= stop)."""
    u = np.clip((np.asarray(x, dtype=float) - start) / (stop - start), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u < 1, np.exp(-1.0 / np.maximum(1 - u, 1e-300)), 0.0)
        b = np.where(u > 0, np.exp(-1.0 / np.maximum(u, 1e-300)), 0.0)
    return a / (a + b)


def modal_expansion(pde, sample_rate=SAMPLE_RATE, mode_limit=MODE_LIMIT):
    """Tabulate the retained modes of the membrane.

    Gains follow the impulse response of each mode to a strike at
    ``(0.4 l, 0.4 l alpha)`` observed at the same point. The ``1/omega_m``
    factor of a velocity impulse is normalized by the fundamental, so mode
    (1, 1) keeps amplitude ``0.03 sin(0.4 pi)^2``. Modes in the top tenth
    below Nyquist fade out smoothly; modes at or above Nyquist are dropped.
    """
    if mode_limit < 1:
        raise ValueError("mode_limit must be >= 1")
    idx = np.arange(1, mode_limit + 1, dtype=float)
    m1, m2 = (a.ravel() for a in np.meshgrid(idx, idx, indexing="ij"))
    g = gamma(m1, m2, pde.alpha, pde.l)
    s4 = pde.S ** 4
    c2 = pde.c ** 2
    w2 = (s4 - pde.d3 ** 2 / 4) * g ** 2 + (c2 + pde.d1 * pde.d3 / 2) * g - pde.d1 ** 2 / 4
    sigma = pde.d3 / 2 * g - pde.d1 / 2

    stable = w2 > 0
    omega = np.sqrt(np.where(stable, w2, 0.0))
    nyquist = sample_rate / 2
    audible = stable & (omega / (2 * np.pi) < nyquist)

    g11 = float(gamma(1, 1, pde.alpha, pde.l))
    w11 = (s4 - pde.d3 ** 2 / 4) * g11 ** 2 + (c2 + pde.d1 * pde.d3 / 2) * g11 - pde.d1 ** 2 / 4
    omega11 = math.sqrt(max(w11, 0.0)) or 1.0

    keep = audible
    om = omega[keep]
    # sine product first so the (m1, m2) <-> (m2, m1) swap is bit-exact
    gain = EXCITATION * (np.sin(np.pi * m1[keep] * STRIKE) * np.sin(np.pi * m2[keep] * STRIKE)) * omega11 / om
    gain = gain * _smooth_fade(om / (2 * np.pi), TAPER_START * nyquist, nyquist)
    return ModeTable(
        m1=m1[keep].astype(int), m2=m2[keep].astype(int), omega=om, sigma=sigma[keep],
        gain=gain, mode_limit=mode_limit,
        n_dropped_nyquist=int(np.sum(stable & ~audible)),
        n_dropped_unstable=int(np.sum(~stable)),
        strike_point=(STRIKE * pde.l, STRIKE * pde.l * pde.alpha),
    )


def render_modes(modes, n_samples, sample_rate=SAMPLE_RATE, block=1024):
    """Sum of ``gain exp(sigma t) sin(omega t)`` over the mode table.

    Samples are generated block-wise as a complex matrix product, which keeps
    every term an exact exponential (no recursive accumulation).
    """
    if len(modes) == 0 or n_samples == 0:
        return np.zeros(n_samples)
    s = (modes.sigma + 1j * modes.omega) / sample_rate
    n_blocks = -(-n_samples // block)
    inner = np.exp(np.outer(s, np.arange(block)))
    outer = modes.gain[None, :] * np.exp(np.outer(np.arange(n_blocks) * block, s))
    x = (outer @ inner).imag.ravel()
    return x[:n_samples]


def synthesize(theta, duration=DURATION, sample_rate=SAMPLE_RATE, mode_limit=MODE_LIMIT,
               normalize_audio=False, excitation_scale=1.0):
    """Render the drum sound ``g(theta)``."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if not isinstance(theta, NormalizedTheta):
        theta = NormalizedTheta(theta)
    shape = denormalize(theta)
    modes = modal_expansion(shape_to_pde(shape), sample_rate, mode_limit)
    n = int(round(duration * sample_rate))
    x = render_modes(modes, n, sample_rate) * excitation_scale
    if normalize_audio:
        peak = np.max(np.abs(x))
        if peak > 1:
            x = x / peak
    return AudioBuffer(x, sample_rate)


def write_wav(path, audio):
    """Write 16-bit PCM mono, peak-scaled to -1 dBFS."""
    x = np.asarray(audio.samples, dtype=float)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 0:
        x = x * (10 ** (-1 / 20) / peak)
    pcm = np.round(x * 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(audio.sample_rate))
        f.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM is supported")
        n_channels = f.getnchannels()
        rate = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2").astype(float) / 32767
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioBuffer(data, rate)
