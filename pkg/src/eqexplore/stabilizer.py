"""LQR equilibrium policy and quadratic Lyapunov certificate."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .systems import ControlAffineSystem, linearize

log = logging.getLogger(__name__)


class NotStabilizable(np.linalg.LinAlgError):
    pass


def _is_hurwitz(M: np.ndarray, margin: float = 0.0) -> bool:
    return bool(np.max(np.linalg.eigvals(M).real) < -margin)


def care_residual(A, B, Q, R, P) -> float:
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    return float(np.max(np.abs(res)))


def _initial_gain(A, B, rng, retries):
    """Stabilizing gain via Bass's pole shift, with seeded perturbed retries."""
    n = A.shape[0]
    if _is_hurwitz(A):
        return np.zeros((B.shape[1], n))
    shift = max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))) + 1.0)
    Z = solve_continuous_lyapunov(A + shift * np.eye(n), 2.0 * B @ B.T)
    scale = max(np.linalg.norm(Z), 1e-12)
    for attempt in range(retries):
        reg = 0.0 if attempt == 0 else scale * 10.0 ** (attempt - 12)
        try:
            K = B.T @ np.linalg.inv(Z + reg * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        if attempt > 1:
            K = K + 1e-3 * np.linalg.norm(K) * rng.standard_normal(K.shape)
        if np.all(np.isfinite(K)) and _is_hurwitz(A - B @ K):
            return K
    raise NotStabilizable("could not find an initial stabilizing gain")


def solve_care(A, B, Q, R, *, max_iter: int = 200, tol: float = 1e-13, seed: int = 0) -> np.ndarray:
    """Stabilizing solution of ``A'P + PA - P B R^-1 B' P + Q = 0`` by Newton-Kleinman."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    rng = np.random.default_rng(seed)
    K = _initial_gain(A, B, rng, retries=12)
    P = np.zeros_like(A)
    prev, stalled = np.inf, 0
    for _ in range(max_iter):
        Acl = A - B @ K
        if not _is_hurwitz(Acl):
            raise NotStabilizable("Newton-Kleinman iterate lost stability")
        P_new = solve_continuous_lyapunov(Acl.T, -(Q + K.T @ R @ K))
        P_new = 0.5 * (P_new + P_new.T)
        K = np.linalg.solve(R, B.T @ P_new)
        delta = np.max(np.abs(P_new - P))
        P = P_new
        scale = max(1.0, np.max(np.abs(P)))
        if delta <= tol * scale:
            break
        # quadratic convergence has ended once steps stop shrinking at round-off level
        stalled = stalled + 1 if delta > 0.5 * prev else 0
        if stalled >= 3 and delta <= 1e-9 * scale:
            break
        prev = delta
    else:
        raise NotStabilizable(f"Newton-Kleinman did not converge in {max_iter} iterations")
    if not _is_hurwitz(A - B @ K):
        raise NotStabilizable("closed loop is not Hurwitz")
    return P


@dataclass(frozen=True, eq=False)
class StabilityCertificate:
    """Affine policy ``u0 - K (x - x0)`` with Lyapunov function ``(x-x0)' P (x-x0)``."""

    K: np.ndarray
    P: np.ndarray
    x0: np.ndarray
    u0: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    r: float = np.inf

    def with_radius(self, r: float) -> "StabilityCertificate":
        return StabilityCertificate(self.K, self.P, self.x0, self.u0, self.u_min, self.u_max, float(r))

    def policy_raw(self, x) -> np.ndarray:
        return self.u0 - self.K @ (np.asarray(x, float) - self.x0)

    def policy(self, x) -> np.ndarray:
        return np.clip(self.policy_raw(x), self.u_min, self.u_max)

    def policy_jacobian(self, x) -> np.ndarray:
        """d mu/dx including the saturation clamp (zero rows on saturated channels)."""
        raw = self.policy_raw(x)
        active = (raw > self.u_min) & (raw < self.u_max)
        return -self.K * active[:, None]


def lqr_certificate(sys: ControlAffineSystem, Q=None, R=None) -> StabilityCertificate:
    """LQR about the plant's declared equilibrium."""
    lin = linearize(sys, sys.x0, sys.u0)
    Q = np.eye(sys.n) if Q is None else np.atleast_2d(np.asarray(Q, float))
    R = np.eye(sys.m) if R is None else np.atleast_2d(np.asarray(R, float))
    P = solve_care(lin.A, lin.B, Q, R)
    K = np.linalg.solve(R, lin.B.T @ P)
    return StabilityCertificate(K=K, P=P, x0=sys.x0.copy(), u0=sys.u0.copy(), u_min=sys.u_min, u_max=sys.u_max)


def equilibrium_policy(cert: StabilityCertificate, x) -> np.ndarray:
    return cert.policy(x)


def lyapunov_value(cert: StabilityCertificate, x) -> float:
    e = np.asarray(x, float) - cert.x0
    return float(e @ cert.P @ e)


def lyapunov_gradient(cert: StabilityCertificate, x) -> np.ndarray:
    return 2.0 * cert.P @ (np.asarray(x, float) - cert.x0)


def lyapunov_rate(cert: StabilityCertificate, sys: ControlAffineSystem, x, u) -> float:
    return float(lyapunov_gradient(cert, x) @ sys.f(x, u))


def _sphere_ok(cert, sys, dirs, radius) -> bool:
    for d in dirs:
        x = cert.x0 + radius * d
        try:
            if not lyapunov_rate(cert, sys, x, cert.policy(x)) < 0.0:
                return False
        except FloatingPointError:
            return False
    return True


def estimate_attraction_radius(cert: StabilityCertificate, sys: ControlAffineSystem, n_samples: int = 200,
                               *, cap: float = 10.0, r_min: float = 1e-4, iters: int = 30,
                               seed: int = 0) -> float:
    """Largest radius whose sampled spheres all have ``Vdot(x, mu(x)) < 0``.

    Bisection on the radius; the same ``n_samples`` unit directions are used at
    every level.  Returns ``cap`` if the cap sphere passes and 0 (with a warning)
    if even ``r_min`` fails.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_samples, sys.n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if not _sphere_ok(cert, sys, dirs, r_min):
        log.warning("attraction radius estimate failed at r=%g; returning 0", r_min)
        return 0.0
    if _sphere_ok(cert, sys, dirs, cap):
        return cap
    lo, hi = r_min, cap
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _sphere_ok(cert, sys, dirs, mid):
            lo = mid
        else:
            hi = mid
    return lo
