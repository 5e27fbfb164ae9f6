"""Control-affine plant models ``xdot = g(x) + h(x) u`` with Jacobians."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ode import finite_diff_jacobian

GRAVITY = 9.81


class DynamicsNaN(FloatingPointError):
    """Non-finite state or a singular configuration reached in the dynamics."""


class ModelSingular(np.linalg.LinAlgError):
    """Mass matrix could not be inverted."""


@dataclass(frozen=True)
class LinearizedModel:
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    """Plant with drift ``g`` and actuation ``h``; f is always assembled as g + h u.

    ``affine`` may return ``(g(x), h(x))`` in one call when the two share work.
    ``jacobian`` returns the unsaturated ``(df/dx, df/du)`` at ``(x, u)``.
    """

    name: str
    n: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]
    u_min: np.ndarray
    u_max: np.ndarray
    x0: np.ndarray
    u0: np.ndarray
    affine: Optional[Callable[[np.ndarray], tuple]] = None
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], tuple]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("u_min", "u_max", "x0", "u0"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float).reshape(-1))
        if self.u_min.size != self.m or self.u_max.size != self.m or self.u0.size != self.m:
            raise ValueError("control bounds and trim must have m entries")
        if self.x0.size != self.n:
            raise ValueError("equilibrium must have n entries")
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be strictly below u_max")
        resid = self.f_raw(self.x0, self.u0)
        if np.max(np.abs(resid)) > 1e-8:
            raise ValueError(f"{self.name}: (x0, u0) is not an equilibrium, |f| = {np.max(np.abs(resid)):.3g}")

    def gh(self, x: np.ndarray) -> tuple:
        if self.affine is not None:
            return self.affine(x)
        return self.drift(x), self.actuation(x)

    def saturate(self, u) -> np.ndarray:
        return np.clip(u, self.u_min, self.u_max)

    def f_raw(self, x, u) -> np.ndarray:
        """Unsaturated ``g(x) + h(x) u``."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DynamicsNaN(f"{self.name}: non-finite state {x}")
        g, h = self.gh(x)
        return g + h @ np.asarray(u, dtype=float)

    def f(self, x, u) -> np.ndarray:
        return self.f_raw(x, self.saturate(u))

    def jacobians(self, x, u) -> tuple:
        """Unsaturated ``(df/dx, df/du)``; finite differences when no analytic form."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.jacobian is not None:
            return self.jacobian(x, u)
        A = finite_diff_jacobian(lambda z: self.f_raw(z, u), x)
        return A, self.actuation(x).copy()


def eval_dynamics(sys: ControlAffineSystem, x, u) -> np.ndarray:
    return sys.f(x, u)


def linearize(sys: ControlAffineSystem, x_ref, u_ref) -> LinearizedModel:
    A, B = sys.jacobians(np.asarray(x_ref, float), np.asarray(u_ref, float))
    return LinearizedModel(np.array(A, dtype=float), np.array(B, dtype=float))


def _wide_limits(m: int, bound: float = 1e6):
    return -bound * np.ones(m), bound * np.ones(m)


def make_linear_system(A, B, x0=None, u0=None, u_min=None, u_max=None, name="linear") -> ControlAffineSystem:
    """``xdot = A (x - x0) + B (u - u0)`` as a control-affine system."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, float)
    u0 = np.zeros(m) if u0 is None else np.asarray(u0, float)
    lo, hi = _wide_limits(m)
    u_min = lo if u_min is None else u_min
    u_max = hi if u_max is None else u_max
    offset = -B @ u0
    return ControlAffineSystem(
        name=name, n=n, m=m,
        drift=lambda x: A @ (x - x0) + offset,
        actuation=lambda x: B,
        affine=lambda x: (A @ (x - x0) + offset, B),
        jacobian=lambda x, u: (A, B),
        u_min=u_min, u_max=u_max, x0=x0, u0=u0,
        params={"A": A, "B": B},
    )


def linear_model_of(sys: ControlAffineSystem, x_ref=None, u_ref=None) -> ControlAffineSystem:
    """Linear approximation of ``sys`` about ``(x_ref, u_ref)`` (default: its equilibrium)."""
    x_ref = sys.x0 if x_ref is None else np.asarray(x_ref, float)
    u_ref = sys.u0 if u_ref is None else np.asarray(u_ref, float)
    lin = linearize(sys, x_ref, u_ref)
    return make_linear_system(lin.A, lin.B, x_ref, u_ref, sys.u_min, sys.u_max, name=f"{sys.name}-linear")


def make_double_integrator(u_limit: float = 1e6) -> ControlAffineSystem:
    return make_linear_system([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]],
                              u_min=[-u_limit], u_max=[u_limit], name="double-integrator")


def make_pendulum(gravity: float = GRAVITY, length: float = 1.0, u_limit: float = 1e6) -> ControlAffineSystem:
    """Single pendulum ``theta'' = -(g/l) sin(theta) + u`` (hanging equilibrium at 0)."""
    w2 = gravity / length
    B = np.array([[0.0], [1.0]])

    def drift(x):
        return np.array([x[1], -w2 * np.sin(x[0])])

    def jac(x, u):
        return np.array([[0.0, 1.0], [-w2 * np.cos(x[0]), 0.0]]), B

    return ControlAffineSystem(
        name="pendulum", n=2, m=1, drift=drift, actuation=lambda x: B, jacobian=jac,
        u_min=[-u_limit], u_max=[u_limit], x0=np.zeros(2), u0=np.zeros(1),
        params={"gravity": gravity, "length": length},
    )


# ---------------------------------------------------------------------------
# Cart double pendulum: q = (cart position, theta1, theta2), absolute link
# angles measured from the upward vertical, point masses at the link tips.
# M(q) qdd + c(q, qd) + G(q) = [1, 0, 0]^T u
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CartDoublePendulumParams:
    m_cart: float = 1.0
    m1: float = 0.1
    m2: float = 0.1
    l1: float = 0.5
    l2: float = 0.5
    gravity: float = GRAVITY
    force_limit: float = 20.0


def _cdp_terms(p: CartDoublePendulumParams, x):
    _, t1, t2, xd, w1, w2 = x
    m12 = p.m1 + p.m2
    s1, c1, s2, c2 = np.sin(t1), np.cos(t1), np.sin(t2), np.cos(t2)
    s12, c12 = np.sin(t1 - t2), np.cos(t1 - t2)
    M = np.array([
        [p.m_cart + m12, m12 * p.l1 * c1, p.m2 * p.l2 * c2],
        [m12 * p.l1 * c1, m12 * p.l1 ** 2, p.m2 * p.l1 * p.l2 * c12],
        [p.m2 * p.l2 * c2, p.m2 * p.l1 * p.l2 * c12, p.m2 * p.l2 ** 2],
    ])
    cor = np.array([
        -m12 * p.l1 * s1 * w1 ** 2 - p.m2 * p.l2 * s2 * w2 ** 2,
        p.m2 * p.l1 * p.l2 * s12 * w2 ** 2,
        -p.m2 * p.l1 * p.l2 * s12 * w1 ** 2,
    ])
    grav = np.array([0.0, -m12 * p.gravity * p.l1 * s1, -p.m2 * p.gravity * p.l2 * s2])
    return M, cor, grav


_CDP_INPUT = np.array([1.0, 0.0, 0.0])


def _cdp_solve(M, rhs):
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as err:
        raise ModelSingular("cart double pendulum mass matrix is singular") from err


def _cdp_affine(p: CartDoublePendulumParams, x):
    M, cor, grav = _cdp_terms(p, x)
    sol = _cdp_solve(M, np.column_stack([-cor - grav, _CDP_INPUT]))
    g = np.concatenate([x[3:], sol[:, 0]])
    h = np.zeros((6, 1))
    h[3:, 0] = sol[:, 1]
    return g, h


def _cdp_jacobian(p: CartDoublePendulumParams, x, u):
    _, t1, t2, _, w1, w2 = x
    m12 = p.m1 + p.m2
    M, cor, grav = _cdp_terms(p, x)
    r = _CDP_INPUT * float(np.asarray(u).reshape(-1)[0]) - cor - grav
    qdd = _cdp_solve(M, r)
    s1, c1, s2, c2 = np.sin(t1), np.cos(t1), np.sin(t2), np.cos(t2)
    s12, c12 = np.sin(t1 - t2), np.cos(t1 - t2)
    ll = p.m2 * p.l1 * p.l2

    # dM/dtheta1, dM/dtheta2 (symmetric)
    dM1 = np.zeros((3, 3))
    dM1[0, 1] = dM1[1, 0] = -m12 * p.l1 * s1
    dM1[1, 2] = dM1[2, 1] = -ll * s12
    dM2 = np.zeros((3, 3))
    dM2[0, 2] = dM2[2, 0] = -p.m2 * p.l2 * s2
    dM2[1, 2] = dM2[2, 1] = ll * s12

    # dr/dq and dr/dqd, r = B u - c - G
    dr_dq = np.zeros((3, 3))
    dr_dq[0, 1] = m12 * p.l1 * c1 * w1 ** 2
    dr_dq[0, 2] = p.m2 * p.l2 * c2 * w2 ** 2
    dr_dq[1, 1] = -ll * c12 * w2 ** 2 + m12 * p.gravity * p.l1 * c1
    dr_dq[1, 2] = ll * c12 * w2 ** 2
    dr_dq[2, 1] = ll * c12 * w1 ** 2
    dr_dq[2, 2] = -ll * c12 * w1 ** 2 + p.m2 * p.gravity * p.l2 * c2
    dr_dqd = np.zeros((3, 3))
    dr_dqd[0, 1] = 2 * m12 * p.l1 * s1 * w1
    dr_dqd[0, 2] = 2 * p.m2 * p.l2 * s2 * w2
    dr_dqd[1, 2] = -2 * ll * s12 * w2
    dr_dqd[2, 1] = 2 * ll * s12 * w1

    dq = dr_dq.copy()
    dq[:, 1] -= dM1 @ qdd
    dq[:, 2] -= dM2 @ qdd
    rhs = np.column_stack([dq, dr_dqd, _CDP_INPUT])
    sol = _cdp_solve(M, rhs)
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3:, :] = sol[:, :6]
    B = np.zeros((6, 1))
    B[3:, 0] = sol[:, 6]
    return A, B


def cart_double_pendulum_energy(p: CartDoublePendulumParams, x) -> float:
    M, _, _ = _cdp_terms(p, x)
    qd = np.asarray(x[3:])
    potential = p.gravity * ((p.m1 + p.m2) * p.l1 * np.cos(x[1]) + p.m2 * p.l2 * np.cos(x[2]))
    return 0.5 * qd @ M @ qd + potential


def make_cart_double_pendulum(params: CartDoublePendulumParams | None = None) -> ControlAffineSystem:
    """Cart double pendulum; upright equilibrium at x0 = 0 with zero force."""
    p = params or CartDoublePendulumParams()
    if min(p.m_cart, p.m1, p.m2, p.l1, p.l2) <= 0:
        raise ValueError("masses and lengths must be positive")
    return ControlAffineSystem(
        name="cart-double-pendulum", n=6, m=1,
        drift=lambda x: _cdp_affine(p, x)[0],
        actuation=lambda x: _cdp_affine(p, x)[1],
        affine=lambda x: _cdp_affine(p, x),
        jacobian=lambda x, u: _cdp_jacobian(p, x, u),
        u_min=[-p.force_limit], u_max=[p.force_limit],
        x0=np.zeros(6), u0=np.zeros(1),
        params={"cdp": p},
    )


# ---------------------------------------------------------------------------
# Quadrotor, 12 states: world position (x, y, z), ZYX Euler angles
# (roll, pitch, yaw), body linear velocity, body angular velocity.
# Rotor layout ("+" frame, z up): rotor 1 on +x, rotor 2 on +y, rotor 3 on -x,
# rotor 4 on -y.  Rotors 1 and 3 spin counter-clockwise seen from above, so
# their drag torque acts along -z.
#   roll torque  = L (u2 - u4)
#   pitch torque = L (u3 - u1)
#   yaw torque   = k_m (-u1 + u2 - u3 + u4)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.5
    inertia: tuple = (4.9e-3, 4.9e-3, 8.8e-3)
    arm: float = 0.175
    yaw_coeff: float = 0.05
    gravity: float = GRAVITY
    thrust_max: float = 2.5


def _rot_zyx(phi, theta, psi):
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array([
        [ct * cp, sf * st * cp - cf * sp, cf * st * cp + sf * sp],
        [ct * sp, sf * st * sp + cf * cp, cf * st * sp - sf * cp],
        [-st, sf * ct, cf * ct],
    ])


def quadrotor_mixer(p: QuadrotorParams) -> np.ndarray:
    """Map rotor thrusts to (total thrust, roll, pitch, yaw torques)."""
    L, k = p.arm, p.yaw_coeff
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [0.0, L, 0.0, -L],
        [-L, 0.0, L, 0.0],
        [-k, k, -k, k],
    ])


def _quad_affine(p: QuadrotorParams, x):
    phi, theta, psi = x[3:6]
    v = x[6:9]
    w = x[9:12]
    ct = np.cos(theta)
    if abs(ct) < 1e-6:
        raise DynamicsNaN("quadrotor Euler-angle singularity (pitch near +-pi/2)")
    R = _rot_zyx(phi, theta, psi)
    sf, cf, tt = np.sin(phi), np.cos(phi), np.tan(theta)
    W = np.array([[1.0, sf * tt, cf * tt], [0.0, cf, -sf], [0.0, sf / ct, cf / ct]])
    J = np.asarray(p.inertia, dtype=float)
    g = np.empty(12)
    g[0:3] = R @ v
    g[3:6] = W @ w
    g[6:9] = -np.cross(w, v) + R.T @ np.array([0.0, 0.0, -p.gravity])
    g[9:12] = -np.cross(w, J * w) / J
    mix = quadrotor_mixer(p)
    h = np.zeros((12, 4))
    h[8, :] = mix[0] / p.mass
    h[9:12, :] = mix[1:] / J[:, None]
    return g, h


def make_quadrotor(params: QuadrotorParams | None = None) -> ControlAffineSystem:
    """Rigid-body quadrotor with per-rotor thrust inputs; hover at the origin."""
    p = params or QuadrotorParams()
    if p.mass <= 0 or min(p.inertia) <= 0:
        raise ValueError("mass and inertia must be positive")
    hover = p.mass * p.gravity / 4.0
    if not 0.0 < hover < p.thrust_max:
        raise ValueError("thrust_max cannot support hover")
    return ControlAffineSystem(
        name="quadrotor", n=12, m=4,
        drift=lambda x: _quad_affine(p, x)[0],
        actuation=lambda x: _quad_affine(p, x)[1],
        affine=lambda x: _quad_affine(p, x),
        u_min=np.zeros(4), u_max=p.thrust_max * np.ones(4),
        x0=np.zeros(12), u0=hover * np.ones(4),
        params={"quad": p},
    )
