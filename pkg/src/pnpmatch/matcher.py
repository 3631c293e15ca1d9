"""Direct sound matching by Levenberg-Marquardt on the feature residual.

Each iteration linearizes ``r(theta) = Phi(g(theta)) - Phi(target)`` with a
finite-difference Jacobian ``A`` and solves ``(A^T A + lam I) s = -A^T r``.
Steps that lower the loss are accepted and relax the damping by 5; rejected
steps stiffen it by 5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import ContractError, PNPError
from .ftm import AudioBuffer, NormalizedTheta, check_normalized, denormalize
from .features import get_feature_map
from .metric import FD_STEP, composed_map, jacobian_fd

LM_FACTOR = 5.0
GRAD_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 200
LAMBDA_MAX = 1e30
MAX_HALVINGS = 30


class NumericalError(PNPError, ArithmeticError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


def solve_damped_normal_equations(M, lam, g_vec):
    """Solve ``(M + lam I) s = g_vec`` by Cholesky factorization."""
    M = np.asarray(M, dtype=float)
    g_vec = np.asarray(g_vec, dtype=float)
    if M.shape != (g_vec.size, g_vec.size):
        raise ContractError(f"system of shape {M.shape} does not match right-hand side of size {g_vec.size}")
    if lam < 0:
        raise ValueError(f"damping must be nonnegative, got {lam}")
    A = M + lam * np.eye(g_vec.size)
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else np.inf
        raise NumericalError(f"damped system is not positive definite (condition estimate {cond:.3g})",
                             condition=cond) from None
    return linalg.cho_solve(c, g_vec)


@dataclass
class MatchOptions:
    lambda0: float = -1.0  # negative: 1e-3 times the mean diagonal of the first metric
    fd_step: float = 3e-2
    fd_step_min: float = FD_STEP
    max_iter: int = MAX_ITER
    grad_tol: float = GRAD_TOL
    step_tol: float = STEP_TOL
    factor: float = LM_FACTOR


@dataclass
class MatchResult:
    theta_hat: NormalizedTheta
    residual: float
    iterations: int
    lambda_trace: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    def to_text(self):
        shape = denormalize(self.theta_hat)
        lines = [
            f"theta_normalized={','.join(repr(float(x)) for x in self.theta_hat.full())}",
            "theta_physical=" + ",".join(f"{k}={getattr(shape, k)!r}"
                                         for k in ("omega1", "tau1", "p", "D", "alpha")),
            f"residual={self.residual!r}",
            f"iterations={self.iterations}",
            f"converged={int(self.converged)}",
            f"reason={self.reason}",
            f"lambda_trace={','.join(repr(x) for x in self.lambda_trace)}",
            f"loss_trace={','.join(repr(x) for x in self.loss_trace)}",
        ]
        return "\n".join(lines) + "\n"


def _pinned(v, s):
    """Components sitting on a bound whose step points outward."""
    return ((v <= -1) & (s < 0)) | ((v >= 1) & (s > 0))


def _damped_step(M, lam, grad, v):
    """LM step with components pinned at the box frozen out of the system."""
    s = -solve_damped_normal_equations(M, lam, grad)
    free = ~_pinned(v, s)
    if not free.all():
        s = np.zeros_like(s)
        if free.any():
            s[free] = -solve_damped_normal_equations(M[np.ix_(free, free)], lam, grad[free])
    return s


def _box_step(v, s, max_halvings=MAX_HALVINGS):
    """Halve ``s`` until ``v + s`` lies in the box, then clamp what is left."""
    for _ in range(max_halvings):
        if np.all(np.abs(v + s) <= 1):
            break
        s = s / 2
    return np.clip(v + s, -1.0, 1.0)


def match(target, theta_init, feature_map="jtfs", opts=None, model=None):
    """Fit ``theta`` so that ``Phi(g(theta))`` matches ``Phi(target)``.

    ``target`` is an :class:`AudioBuffer` or a precomputed feature vector.
    ``model`` replaces the composed map ``theta values -> features``.
    Failures of the linear algebra end the run with ``converged=False``.
    """
    opts = opts or MatchOptions()
    if not isinstance(theta_init, NormalizedTheta):
        theta_init = NormalizedTheta(theta_init)
    check_normalized(theta_init.values)
    if model is None:
        model = composed_map(feature_map, pitch=theta_init.pitch)
    if isinstance(target, AudioBuffer):
        phi = get_feature_map(feature_map) if isinstance(feature_map, str) else feature_map
        target_phi = np.asarray(phi(target), dtype=float)
    else:
        target_phi = np.asarray(getattr(target, "values", target), dtype=float)

    v = np.clip(theta_init.values.copy(), -1, 1)
    r = model(v) - target_phi
    loss = 0.5 * float(r @ r)
    lam = opts.lambda0
    h = max(opts.fd_step, opts.fd_step_min)
    lam_trace, loss_trace = [], [loss]
    converged, reason = False, "max_iter"
    it = 0
    while it < opts.max_iter:
        try:
            jac = jacobian_fd(theta_init.replace(v), h=h, model=model).entries
        except PNPError as exc:
            reason = f"jacobian: {exc}"
            break
        M = jac.T @ jac
        grad = jac.T @ r
        if np.linalg.norm(np.where(_pinned(v, -grad), 0.0, grad)) < opts.grad_tol:
            converged, reason = True, "gradient"
            break
        if lam < 0:
            lam = 1e-3 * max(float(np.trace(M)) / len(v), np.finfo(float).tiny)
        it += 1
        # inner loop: stiffen lambda until a step is accepted
        while True:
            lam_trace.append(lam)
            try:
                s = _damped_step(M, lam, grad, v)
            except NumericalError as exc:
                reason = f"numerical: {exc}"
                return MatchResult(theta_init.replace(v), float(np.linalg.norm(r)), it, lam_trace, loss_trace,
                                   False, reason)
            v_new = _box_step(v, s)
            step = np.linalg.norm(v_new - v)
            if step < opts.step_tol:
                converged, reason = True, "step"
                break
            try:
                r_new = model(v_new) - target_phi
                loss_new = 0.5 * float(r_new @ r_new)
            except PNPError:
                loss_new = np.inf  # unrenderable trial point: treat as a rejected step
            if loss_new < loss:
                v, r, loss = v_new, r_new, loss_new
                loss_trace.append(loss)
                lam /= opts.factor
                break
            lam *= opts.factor
            if lam > LAMBDA_MAX:
                reason = "lambda_overflow"
                break
        if (converged or reason == "lambda_overflow") and h > opts.fd_step_min:
            # stalled on a wide secant: refine the difference step and restart the damping
            h = max(h / opts.factor, opts.fd_step_min)
            lam, converged, reason = opts.lambda0, False, "max_iter"
            continue
        if converged or reason == "lambda_overflow":
            break
    return MatchResult(theta_init.replace(v), float(np.linalg.norm(r)), it, lam_trace, loss_trace,
                       converged, reason)
