"""Riemannian metric of the composed map ``Phi o g`` in normalized coordinates.

The Jacobian is estimated by central finite differences, the metric is its
Gram matrix ``M = J^T J`` and records keep the eigendecomposition so that the
eigen form of the PNP loss is available without refactorization. Records are
persisted in a fixed-stride little-endian binary cache.
"""

from __future__ import annotations

import csv
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, FormatError, MissingMetricError, PNPError, SynthesisError
from .features import get_feature_map
from .ftm import MODE_LIMIT, NormalizedTheta, synthesize

FD_STEP = 1e-4
SYMMETRY_RTOL = 1e-10

_CACHE_MAGIC = b"PNPM"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class JacobianMatrix:
    entries: np.ndarray  # (P, J)
    theta: NormalizedTheta
    fd_step: float
    feature_map_id: str
    one_sided: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def shape(self):
        return self.entries.shape


@dataclass(frozen=True)
class MetricRecord:
    M: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns are eigenvectors
    theta: np.ndarray
    feature_map_id: str = ""
    fd_step: float = FD_STEP
    sample_id: int = 0

    @property
    def J(self):
        return self.M.shape[0]

    @classmethod
    def from_matrix(cls, M, theta=None, **kwargs):
        M = np.asarray(M, dtype=float)
        w, v = eig_sym(M)
        theta = np.zeros(M.shape[0]) if theta is None else np.asarray(theta, dtype=float)
        return cls(M=0.5 * (M + M.T), eigenvalues=w, eigenvectors=v, theta=theta, **kwargs)


def composed_map(feature_map="jtfs", pitch=None, mode_limit=MODE_LIMIT, **synth_kwargs):
    """``theta values -> Phi(g(theta))`` for a named or callable feature map."""
    phi = get_feature_map(feature_map) if isinstance(feature_map, str) else feature_map

    def model(values):
        theta = NormalizedTheta(values, pitch) if len(values) == 4 else NormalizedTheta(values)
        try:
            audio = synthesize(theta, mode_limit=mode_limit, **synth_kwargs)
        except PNPError as exc:
            raise SynthesisError(f"synthesis failed at theta={np.round(values, 6).tolist()}: {exc}",
                                 theta=np.array(values)) from exc
        return np.asarray(phi(audio), dtype=float)

    return model


def jacobian_fd(theta, feature_map="jtfs", h=FD_STEP, model=None, feature_map_id=None):
    """Finite-difference Jacobian of ``Phi o g`` at ``theta``.

    Central differences are used when ``theta +- h`` stays inside the cube,
    second-order one-sided differences otherwise (flagged in ``one_sided``).
    ``model`` overrides the composed map, e.g. with a known linear function.
    """
    if not isinstance(theta, NormalizedTheta):
        theta = NormalizedTheta(theta)
    h = np.broadcast_to(np.asarray(h, dtype=float), (theta.J,)).copy()
    if np.any(h <= 0):
        raise ValueError("fd step must be positive")
    if model is None:
        model = composed_map(feature_map, pitch=theta.pitch)
        fid = feature_map if isinstance(feature_map, str) else getattr(feature_map, "__name__", "custom")
    else:
        fid = feature_map_id or "custom"
    v = theta.values
    f0 = None
    cols = []
    one_sided = np.zeros(theta.J, dtype=bool)
    for j in range(theta.J):
        e = np.zeros(theta.J)
        e[j] = h[j]
        if v[j] + h[j] <= 1 and v[j] - h[j] >= -1:
            cols.append((model(v + e) - model(v - e)) / (2 * h[j]))
            continue
        one_sided[j] = True
        if f0 is None:
            f0 = model(v)
        sign = -1.0 if v[j] + h[j] > 1 else 1.0
        f1 = model(v + sign * e)
        f2 = model(v + 2 * sign * e)
        cols.append(sign * (-3 * f0 + 4 * f1 - f2) / (2 * h[j]))
    entries = np.stack(cols, axis=1)
    if not np.all(np.isfinite(entries)):
        raise SynthesisError(f"non-finite Jacobian at theta={v.tolist()}", theta=v)
    return JacobianMatrix(entries, theta, float(h[0]) if np.all(h == h[0]) else h, fid, one_sided)


def gram(jac):
    """``M = J^T J``."""
    a = jac.entries if isinstance(jac, JacobianMatrix) else np.asarray(jac, dtype=float)
    M = a.T @ a
    return 0.5 * (M + M.T)


def eig_sym(M):
    """Eigenvalues in descending order and orthonormal eigenvectors (columns).

    Each eigenvector is signed so that its largest-magnitude entry is positive.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {M.shape}")
    scale = max(np.max(np.abs(M)), np.finfo(float).tiny)
    if np.max(np.abs(M - M.T)) > SYMMETRY_RTOL * scale:
        raise ContractError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (M + M.T))
    w, v = w[::-1], v[:, ::-1]
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1
    return w, v * signs


def clamp_eigenvalues(w):
    """Zero out negative eigenvalues produced by roundoff."""
    return np.maximum(np.asarray(w, dtype=float), 0.0)


def damp(M, lam):
    if lam < 0:
        raise ValueError(f"damping must be nonnegative, got {lam}")
    M = np.asarray(M, dtype=float)
    return M + lam * np.eye(M.shape[0])


def metric_from_jacobian(jac, sample_id=0):
    M = gram(jac)
    w, v = eig_sym(M)
    theta = jac.theta.values if isinstance(jac.theta, NormalizedTheta) else np.asarray(jac.theta)
    return MetricRecord(M=M, eigenvalues=clamp_eigenvalues(w), eigenvectors=v, theta=theta.copy(),
                        feature_map_id=jac.feature_map_id, fd_step=float(np.atleast_1d(jac.fd_step)[0]),
                        sample_id=int(sample_id))


def compute_metric(theta, feature_map="jtfs", h=FD_STEP, sample_id=0):
    return metric_from_jacobian(jacobian_fd(theta, feature_map, h), sample_id)


def _metric_job(args):
    sample_id, values, pitch, feature_map, h = args
    theta = NormalizedTheta(values, pitch) if len(values) == 4 else NormalizedTheta(values)
    try:
        return compute_metric(theta, feature_map, h, sample_id), None
    except PNPError as exc:
        return None, (sample_id, str(exc))


def compute_metrics(jobs, feature_map="jtfs", h=FD_STEP, workers=None):
    """Metric records for ``(sample_id, theta)`` pairs; failures are collected.

    Returns ``(records, failures)`` with records in input order.
    """
    workers = workers or int(os.environ.get("PNP_WORKERS", "1"))
    args = [(sid, th.values, th.pitch, feature_map, h) for sid, th in jobs]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_metric_job, args))
    else:
        results = [_metric_job(a) for a in args]
    records = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]
    return records, failures


class MetricCache:
    """In-memory view of a metric cache with O(1) lookup by sample id."""

    def __init__(self, records, feature_map_id="", J=None):
        self.records = list(records)
        self.feature_map_id = feature_map_id
        self.J = J if J is not None else (self.records[0].J if self.records else 0)
        self._index = {r.sample_id: i for i, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def __contains__(self, sample_id):
        return int(sample_id) in self._index

    def __getitem__(self, sample_id):
        try:
            return self.records[self._index[int(sample_id)]]
        except KeyError:
            raise MissingMetricError(sample_id) from None

    def stacked(self, sample_ids):
        """``(len(ids), J, J)`` array of metrics, raising on the first missing id."""
        return np.stack([self[s].M for s in sample_ids]) if len(sample_ids) else np.zeros((0, self.J, self.J))

    def max_eigenvalue(self):
        return max((float(r.eigenvalues[0]) for r in self.records), default=0.0)


def cache_write(records, path, feature_map_id=None):
    records = list(records)
    J = records[0].J if records else 0
    fid = feature_map_id if feature_map_id is not None else (records[0].feature_map_id if records else "")
    for r in records:
        if r.J != J:
            raise ContractError(f"record {r.sample_id} has J={r.J}, expected {J}")
        if r.feature_map_id != fid:
            raise ContractError(f"record {r.sample_id} uses feature map {r.feature_map_id!r}, expected {fid!r}")
    iu = np.triu_indices(J)
    fid_b = fid.encode()
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<IIQH", _CACHE_VERSION, J, len(records), len(fid_b)))
        f.write(fid_b)
        for r in records:
            f.write(struct.pack("<Q", r.sample_id))
            body = np.concatenate([r.theta, r.M[iu], r.eigenvalues, r.eigenvectors.ravel(), [r.fd_step]])
            f.write(body.astype("<f8").tobytes())


def cache_read(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != _CACHE_MAGIC:
        raise FormatError(f"{path}: magic mismatch ({data[:4]!r})")
    head = struct.calcsize("<IIQH")
    if len(data) < 4 + head:
        raise FormatError(f"{path}: truncated header")
    version, J, n, n_fid = struct.unpack_from("<IIQH", data, 4)
    if version != _CACHE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + head + n_fid
    fid = data[4 + head:off].decode()
    n_tri = J * (J + 1) // 2
    stride = 8 + 8 * (J + n_tri + J + J * J + 1)
    if len(data) != off + n * stride:
        raise FormatError(f"{path}: truncated or oversized body ({len(data) - off} bytes for {n} records)")
    iu = np.triu_indices(J)
    records = []
    for k in range(n):
        base = off + k * stride
        (sid,) = struct.unpack_from("<Q", data, base)
        body = np.frombuffer(data, dtype="<f8", count=(stride - 8) // 8, offset=base + 8)
        theta = body[:J].copy()
        M = np.zeros((J, J))
        M[iu] = body[J:J + n_tri]
        M = M + np.triu(M, 1).T
        p = J + n_tri
        w = body[p:p + J].copy()
        v = body[p + J:p + J + J * J].reshape(J, J).copy()
        records.append(MetricRecord(M=M, eigenvalues=w, eigenvectors=v, theta=theta, feature_map_id=fid,
                                    fd_step=float(body[-1]), sample_id=int(sid)))
    return MetricCache(records, fid, J)


def write_eigenvalue_csv(records, path):
    """One row per sample: id then eigenvalues in descending order."""
    records = list(records)
    J = records[0].J if records else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", *(f"sigma2_{j + 1}" for j in range(J))])
        for r in records:
            w.writerow([r.sample_id, *(repr(float(x)) for x in r.eigenvalues)])
