"""Parameter, spectral and perceptual-neural-physical losses.

All losses carry a factor one half so that the quadratic forms line up:
``pnp_loss(M=I, lam=0) == p_loss`` and, for small errors,
``pnp_loss(lam=0) ~ spectral_loss`` with a cubic remainder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError
from .features import FeatureVector
from .ftm import NormalizedTheta

LOSS_KINDS = ("p_loss", "spectral", "pnp")


@dataclass(frozen=True)
class LossValue:
    value: float
    kind: str
    lam: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not math.isfinite(self.value) or self.value < 0:
            raise ContractError(f"loss must be finite and nonnegative, got {self.value}")

    def __float__(self):
        return float(self.value)


def _vec(x):
    if isinstance(x, NormalizedTheta):
        return x.values
    return np.asarray(x, dtype=float)


def _delta(theta_hat, theta):
    a, b = _vec(theta_hat), _vec(theta)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a - b


def _matrix(metric, J):
    M = getattr(metric, "M", metric)
    M = np.asarray(M, dtype=float)
    if M.shape != (J, J):
        raise ContractError(f"metric has shape {M.shape}, expected {(J, J)}")
    return M


def _check_lam(lam):
    if not lam >= 0:
        raise ValueError(f"damping must be nonnegative, got {lam}")
    return float(lam)


def p_loss(theta_hat, theta):
    d = _delta(theta_hat, theta)
    return LossValue(0.5 * float(d @ d), "p_loss")


def spectral_loss(phi_a, phi_b):
    if isinstance(phi_a, FeatureVector) and isinstance(phi_b, FeatureVector):
        if phi_a.feature_map_id != phi_b.feature_map_id:
            raise ContractError(f"feature maps differ: {phi_a.feature_map_id!r} vs {phi_b.feature_map_id!r}")
        a, b = phi_a.values, phi_b.values
    else:
        a, b = np.asarray(getattr(phi_a, "values", phi_a), float), np.asarray(getattr(phi_b, "values", phi_b), float)
    if a.shape != b.shape:
        raise ContractError(f"feature lengths differ: {a.shape} vs {b.shape}")
    d = a - b
    return LossValue(0.5 * float(d @ d), "spectral")


def pnp_loss(theta_hat, theta, metric, lam=0.0):
    d = _delta(theta_hat, theta)
    lam = _check_lam(lam)
    M = _matrix(metric, d.size)
    quad = float(d @ M @ d) + lam * float(d @ d)
    # roundoff can push a PSD quadratic form a hair below zero
    return LossValue(0.5 * max(quad, 0.0), "pnp", lam)


def pnp_loss_eig(theta_hat, theta, metric, lam=0.0):
    """Same value as :func:`pnp_loss`, from the stored eigendecomposition."""
    d = _delta(theta_hat, theta)
    lam = _check_lam(lam)
    w = getattr(metric, "eigenvalues", None)
    v = getattr(metric, "eigenvectors", None)
    if w is None or v is None:
        raise ContractError("metric record carries no eigendecomposition")
    proj = np.asarray(v).T @ d
    quad = float(np.sum(np.asarray(w) * proj**2)) + lam * float(d @ d)
    return LossValue(0.5 * max(quad, 0.0), "pnp", lam)


def pnp_grad_factor(theta_hat, theta, metric, lam=0.0):
    """Gradient of :func:`pnp_loss` with respect to ``theta_hat``: ``(M + lam I) delta``."""
    d = _delta(theta_hat, theta)
    lam = _check_lam(lam)
    M = _matrix(metric, d.size)
    return M @ d + lam * d


def batch_pnp(theta_hat, theta, M, lam):
    """Mean PNP loss and per-sample gradient factors for ``(B, J)`` batches.

    ``M`` is ``(B, J, J)``; ``None`` means the identity, which reduces to P-loss.
    """
    d = np.asarray(theta_hat, float) - np.asarray(theta, float)
    g = d if M is None else np.einsum("bij,bj->bi", M, d)
    if lam:
        g = g + lam * d
    value = 0.5 * float(np.mean(np.sum(d * g, axis=1))) if len(d) else 0.0
    return value, g
