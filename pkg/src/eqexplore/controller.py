"""Hybrid exploration controller: switch from an equilibrium policy to an
exploration control when the mode insertion gradient says the switch pays.

One planning cycle:

1. roll the equilibrium policy forward over the horizon on the planning model,
2. integrate the adjoint backwards along that rollout,
3. form the exploration schedule ``mu*(t) = mu(x) - R^-1 h(x)' rho``,
4. evaluate ``dJ/dlambda = rho' (f(x, mu*) - f(x, mu(x)))`` on the grid,
5. pick the most negative insertion time and back off the duration until the
   re-simulated objective decreases.

The objective is the sampled KL coverage term plus a task cost, both
evaluated with the policy control ``mu(x(t))`` so that the objective is a
function of the state trajectory alone.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .coverage import CoverageObjective, CoverageState, SearchDomain, make_sample_set, trapezoid_weights
from .ode import IntegrationDiverged, TimeGrid, Trajectory, finite_diff_jacobian, rk4_step
from .stabilizer import StabilityCertificate, lyapunov_gradient, lyapunov_rate, lyapunov_value
from .systems import ControlAffineSystem

log = logging.getLogger(__name__)

EPS_G = 1e-8


# ---------------------------------------------------------------------------
# task objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TaskObjective:
    """Running cost l(x, u) and terminal cost m(x) with their gradients."""

    n: int
    m: int
    running: Callable
    running_grad: Callable  # (x, u) -> (dl/dx, dl/du)
    terminal: Callable
    terminal_grad: Callable
    self_check: bool = True

    def __post_init__(self):
        if not self.self_check:
            return
        rng = np.random.default_rng(0)
        for _ in range(3):
            x = rng.standard_normal(self.n)
            u = rng.standard_normal(self.m)
            lx, lu = self.running_grad(x, u)
            fx = finite_diff_jacobian(lambda z: np.atleast_1d(self.running(z, u)), x, 1e-6)[0]
            fu = finite_diff_jacobian(lambda z: np.atleast_1d(self.running(x, z)), u, 1e-6)[0]
            mx = finite_diff_jacobian(lambda z: np.atleast_1d(self.terminal(z)), x, 1e-6)[0]
            for got, want in ((lx, fx), (lu, fu), (self.terminal_grad(x), mx)):
                if np.max(np.abs(np.asarray(got) - want)) > 1e-5 * max(1.0, np.max(np.abs(want))):
                    raise ValueError("task objective gradients disagree with finite differences")


def quadratic_task(Q, R=None, Qf=None, x_ref=None, u_ref=None) -> TaskObjective:
    """l = 1/2 (x-x_ref)'Q(x-x_ref) + 1/2 (u-u_ref)'R(u-u_ref),  m = 1/2 (x-x_ref)'Qf(x-x_ref)."""
    Q = np.atleast_2d(np.asarray(Q, float))
    n = Q.shape[0]
    R = np.zeros((1, 1)) if R is None else np.atleast_2d(np.asarray(R, float))
    m = R.shape[0]
    Qf = np.zeros_like(Q) if Qf is None else np.atleast_2d(np.asarray(Qf, float))
    xr = np.zeros(n) if x_ref is None else np.asarray(x_ref, float)
    ur = np.zeros(m) if u_ref is None else np.asarray(u_ref, float)
    return TaskObjective(
        n=n, m=m,
        running=lambda x, u: 0.5 * (x - xr) @ Q @ (x - xr) + 0.5 * (u - ur) @ R @ (u - ur),
        running_grad=lambda x, u: (Q @ (x - xr), R @ (u - ur)),
        terminal=lambda x: 0.5 * (x - xr) @ Qf @ (x - xr),
        terminal_grad=lambda x: Qf @ (x - xr),
    )


def zero_task(n: int, m: int) -> TaskObjective:
    return quadratic_task(np.zeros((n, n)), np.zeros((m, m)))


# ---------------------------------------------------------------------------
# rollout, objective, adjoint
# ---------------------------------------------------------------------------

def _law(sys, cert, offset):
    if offset is None:
        return lambda t, x: sys.f(x, cert.policy(x))
    return lambda t, x: sys.f(x, cert.policy(x) + offset)


def rollout_policy(sys: ControlAffineSystem, cert: StabilityCertificate, x_init, grid: TimeGrid,
                   offsets: Optional[np.ndarray] = None, prefix: Optional[Trajectory] = None,
                   start: int = 0) -> Trajectory:
    """Closed-loop rollout of ``mu(x)``; ``offsets[k]`` (if not None/NaN) is added on step k.

    With ``prefix`` the first ``start`` steps are copied from an earlier rollout
    of the same law.
    """
    K = grid.n_steps
    X = np.empty((K + 1, sys.n))
    U = np.empty((K + 1, sys.m))
    if prefix is not None and start > 0:
        X[: start + 1] = prefix.x[: start + 1]
        U[:start] = prefix.u[:start]
    else:
        start = 0
        X[0] = np.asarray(x_init, float)
    for k in range(start, K):
        off = None
        if offsets is not None and not np.isnan(offsets[k, 0]):
            off = offsets[k]
        x = X[k]
        U[k] = sys.saturate(cert.policy(x) if off is None else cert.policy(x) + off)
        try:
            X[k + 1] = rk4_step(_law(sys, cert, off), grid.time(k), x, grid.dt)
        except (IntegrationDiverged, FloatingPointError) as err:
            raise IntegrationDiverged(grid.time(k), x, step=k) from err
    U[K] = cert.policy(X[K])
    return Trajectory(grid, X, U)


def policy_controls(cert: StabilityCertificate, X) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.clip(cert.u0 - (X - cert.x0) @ cert.K.T, cert.u_min, cert.u_max)


class PlanObjective:
    """J = sampled KL + integral of l(x, mu(x)) + m(x(T)) for trajectories on one planning grid."""

    def __init__(self, cert: StabilityCertificate, task: TaskObjective, domain: SearchDomain,
                 coverage: Optional[CoverageObjective]):
        self.cert = cert
        self.task = task
        self.domain = domain
        self.coverage = coverage

    def domain_points(self, traj: Trajectory) -> np.ndarray:
        return self.domain.project(traj.x, policy_controls(self.cert, traj.x))

    def parts(self, traj: Trajectory) -> tuple:
        kl = 0.0
        if self.coverage is not None:
            kl = self.coverage.kl(traj.t, self.domain_points(traj))
        U = policy_controls(self.cert, traj.x)
        run = np.array([self.task.running(x, u) for x, u in zip(traj.x, U)])
        task = float(trapezoid_weights(traj.t) @ run) + float(self.task.terminal(traj.x[-1]))
        return kl, task

    def __call__(self, traj: Trajectory) -> float:
        kl, task = self.parts(traj)
        return kl + task


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    grid: TimeGrid
    rho: np.ndarray  # (n_steps + 1, n)


def _adjoint_coefficients(sys, cert, task, objective: PlanObjective, Y):
    """Closed-loop Jacobians (P, n, n) and forcing terms (P, n) at states Y."""
    U = policy_controls(cert, Y)
    P = Y.shape[0]
    n = sys.n
    Acl = np.empty((P, n, n))
    forcing = np.empty((P, n))
    cov_grad = None
    if objective.coverage is not None:
        cov_grad = objective.coverage.gradient_density(objective.domain.project(Y, U))
    for i in range(P):
        y, u = Y[i], U[i]
        mu_x = cert.policy_jacobian(y)
        A, B = sys.jacobians(y, u)
        Acl[i] = A + B @ mu_x
        lx, lu = task.running_grad(y, u)
        fr = lx + mu_x.T @ lu
        if cov_grad is not None:
            fr = fr - objective.domain.projection_jacobian(mu_x).T @ cov_grad[i]
        forcing[i] = fr
    return Acl, forcing


def integrate_adjoint(sys: ControlAffineSystem, cert: StabilityCertificate, task: TaskObjective,
                      objective: PlanObjective, planned: Trajectory) -> AdjointSolution:
    """Backward RK4 of rho' = -(l_x + mu_x' l_u - coverage term) - (f_x + f_u mu_x)' rho.

    Stage values between grid points use cubic Hermite reconstruction of the
    planned state from the grid values and their derivatives.
    """
    grid = planned.grid
    X = planned.x
    dt = grid.dt
    F = np.array([sys.f(x, u) for x, u in zip(X, planned.u)])
    Xmid = 0.5 * (X[:-1] + X[1:]) + dt / 8.0 * (F[:-1] - F[1:])
    A_g, b_g = _adjoint_coefficients(sys, cert, task, objective, X)
    A_m, b_m = _adjoint_coefficients(sys, cert, task, objective, Xmid)

    K = grid.n_steps
    rho = np.empty((K + 1, sys.n))
    rho[K] = task.terminal_grad(X[K])

    # reversed time s = T - t:  d rho / ds = forcing + Acl' rho
    def rate(A, b, r):
        return b + A.T @ r

    for k in range(K - 1, -1, -1):
        r = rho[k + 1]
        k1 = rate(A_g[k + 1], b_g[k + 1], r)
        k2 = rate(A_m[k], b_m[k], r + 0.5 * dt * k1)
        k3 = rate(A_m[k], b_m[k], r + 0.5 * dt * k2)
        k4 = rate(A_g[k], b_g[k], r + dt * k3)
        rho[k] = r + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(rho[k])):
            raise IntegrationDiverged(grid.time(k), rho[k], step=k)
    return AdjointSolution(grid, rho)


# ---------------------------------------------------------------------------
# exploration schedule and mode insertion gradient
# ---------------------------------------------------------------------------

def _actuations(sys, X):
    return np.array([sys.gh(x)[1] for x in X])


def exploration_offsets(sys: ControlAffineSystem, adj: AdjointSolution, planned: Trajectory, R_reg) -> np.ndarray:
    """-R^-1 h(x(t))' rho(t) on the grid, (n_steps + 1, m)."""
    R_reg = np.atleast_2d(np.asarray(R_reg, float))
    H = _actuations(sys, planned.x)
    hr = np.einsum("kij,ki->kj", H, adj.rho)
    return -np.linalg.solve(R_reg, hr.T).T


def exploration_schedule(sys: ControlAffineSystem, cert: StabilityCertificate, adj: AdjointSolution,
                         planned: Trajectory, R_reg) -> np.ndarray:
    """mu*(t) = -R^-1 h(x)' rho + mu(x) on the grid (unclamped)."""
    return policy_controls(cert, planned.x) + exploration_offsets(sys, adj, planned, R_reg)


def mode_insertion_gradient(sys: ControlAffineSystem, cert: StabilityCertificate, adj: AdjointSolution,
                            planned: Trajectory, mu_star, k: int) -> float:
    """rho(t_k)' (f(x, mu*) - f(x, mu(x))), unsaturated."""
    x = planned.x[k]
    h = sys.gh(x)[1]
    return float(adj.rho[k] @ (h @ (np.asarray(mu_star)[k] - cert.policy(x))))


def insertion_gradients(sys, cert, adj, planned, mu_star) -> np.ndarray:
    H = _actuations(sys, planned.x)
    du = np.asarray(mu_star) - policy_controls(cert, planned.x)
    return np.einsum("ki,kij,kj->k", adj.rho, H, du)


def insertion_identity_residual(sys, adj, planned, djdlam, R_reg) -> np.ndarray:
    """dJ/dlambda + ||h' rho||^2_{R^-1} at every grid point (zero for the unclamped schedule)."""
    R_reg = np.atleast_2d(np.asarray(R_reg, float))
    H = _actuations(sys, planned.x)
    hr = np.einsum("kij,ki->kj", H, adj.rho)
    return djdlam + np.einsum("ki,ki->k", hr, np.linalg.solve(R_reg, hr.T).T)


# ---------------------------------------------------------------------------
# window choice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InsertionWindow:
    tau: float
    lam: float
    djdlam: float
    dJ: float
    applied: bool
    tau_index: int = 0
    steps: int = 0


def choose_window(djdlam, grid: TimeGrid, lambda_max: float, delta_j: Callable[[int, int], float],
                  eps_g: float = EPS_G) -> InsertionWindow:
    """Earliest argmin of dJ/dlambda, then halve the duration until the re-simulated dJ < 0."""
    djdlam = np.asarray(djdlam, float)
    k = int(np.argmin(djdlam[: grid.n_steps]))
    g = float(djdlam[k])
    tau = grid.time(k)
    steps = min(int(np.floor(lambda_max / grid.dt + 1e-9)), grid.n_steps - k)
    if not g < -eps_g or steps < 1:
        return InsertionWindow(tau, 0.0, g, float("nan"), False, k, 0)
    while steps >= 1:
        dJ = float(delta_j(k, steps))
        if dJ < 0.0:
            return InsertionWindow(tau, steps * grid.dt, g, dJ, True, k, steps)
        steps //= 2
    return InsertionWindow(tau, 0.0, g, float("nan"), False, k, 0)


# ---------------------------------------------------------------------------
# receding-horizon agent
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerSettings:
    horizon: float
    dt: float
    r_reg: np.ndarray
    lambda_max: float
    n_samples: int = 100
    eps_g: float = EPS_G

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))


@dataclass(eq=False)
class Plan:
    nominal: Trajectory
    objective: PlanObjective
    J0: float
    kl: float
    adjoint: AdjointSolution
    offsets: np.ndarray
    mu_star: np.ndarray
    djdlam: np.ndarray
    identity_residual: float
    window: InsertionWindow


@dataclass(eq=False)
class StepResult:
    cert: StabilityCertificate
    offset: Optional[np.ndarray]
    plan: Optional[Plan] = None
    flagged: bool = False

    @property
    def applied(self) -> bool:
        return self.offset is not None

    def control(self, t, x) -> np.ndarray:
        u = self.cert.policy(x)
        return u if self.offset is None else u + self.offset


class ExplorationController:
    """Receding-horizon switching between ``mu(x)`` and the exploration schedule.

    ``importance_fn(points) -> weights`` supplies the importance distribution at
    the uniform domain samples redrawn every cycle.
    """

    def __init__(self, model: ControlAffineSystem, cert: StabilityCertificate, task: TaskObjective,
                 domain: SearchDomain, coverage: CoverageState, settings: ControllerSettings,
                 importance_fn: Callable[[np.ndarray], np.ndarray], rng: np.random.Generator):
        self.model = model
        self.cert = cert
        self.task = task
        self.domain = domain
        self.coverage = coverage
        self.settings = settings
        self.importance_fn = importance_fn
        self.rng = rng
        self.R_reg = np.atleast_2d(np.asarray(settings.r_reg, float))

    def plan(self, x_now, t_now: float, lambda_max: Optional[float] = None) -> Plan:
        s = self.settings
        grid = TimeGrid(t_now, s.dt, s.n_steps)
        pts = self.domain.sample_uniform(self.rng, s.n_samples)
        samples = make_sample_set(self.domain, pts, self.importance_fn(pts))
        nominal = rollout_policy(self.model, self.cert, x_now, grid)
        base = PlanObjective(self.cert, self.task, self.domain, None)
        cov = CoverageObjective(self.coverage, self.domain, samples, t_now, grid.times,
                                base.domain_points(nominal))
        objective = PlanObjective(self.cert, self.task, self.domain, cov)
        kl, task_cost = objective.parts(nominal)
        J0 = kl + task_cost
        adj = integrate_adjoint(self.model, self.cert, self.task, objective, nominal)
        offsets = exploration_offsets(self.model, adj, nominal, self.R_reg)
        mu_star = policy_controls(self.cert, nominal.x) + offsets
        djdlam = insertion_gradients(self.model, self.cert, adj, nominal, mu_star)
        residual = insertion_identity_residual(self.model, adj, nominal, djdlam, self.R_reg)
        identity_residual = float(np.max(np.abs(residual)))

        def delta_j(k0, steps):
            off = np.full_like(offsets, np.nan)
            off[k0:k0 + steps] = offsets[k0:k0 + steps]
            traj = rollout_policy(self.model, self.cert, x_now, grid, off, prefix=nominal, start=k0)
            return objective(traj) - J0

        lam_max = s.lambda_max if lambda_max is None else lambda_max
        window = choose_window(djdlam, grid, lam_max, delta_j, s.eps_g)
        return Plan(nominal, objective, J0, kl, adj, offsets, mu_star, djdlam, identity_residual, window)

    def step(self, x_now, t_now: float, lambda_max: Optional[float] = None) -> StepResult:
        x_now = np.asarray(x_now, float)
        try:
            plan = self.plan(x_now, t_now, lambda_max)
        except (FloatingPointError, np.linalg.LinAlgError) as err:
            log.warning("planning failed at t=%.3f (%s); holding equilibrium policy", t_now, err)
            result = StepResult(self.cert, None, None, flagged=True)
        else:
            w = plan.window
            offset = plan.offsets[0].copy() if (w.applied and w.tau_index == 0) else None
            result = StepResult(self.cert, offset, plan)
        u_now = self.model.saturate(result.control(t_now, x_now))
        self.coverage.append(t_now, self.domain.project(x_now, u_now))
        return result


# ---------------------------------------------------------------------------
# Lyapunov monitoring
# ---------------------------------------------------------------------------

@dataclass
class WindowRecord:
    start: int
    stop: int
    t_start: float
    duration: float
    beta: float       # sup over this window
    beta_hat: float   # running max over all windows up to and including this one
    V_end: float
    V_base_end: float

    def margin(self, eps_int: float) -> float:
        return self.duration * self.beta_hat + eps_int - (self.V_end - self.V_base_end)


@dataclass
class LyapunovTrace:
    V: list = field(default_factory=list)
    Vdot: list = field(default_factory=list)
    applied: list = field(default_factory=list)
    beta: list = field(default_factory=list)  # per step, NaN outside windows
    windows: list = field(default_factory=list)

    @property
    def beta_hat(self) -> float:
        return self.windows[-1].beta_hat if self.windows else float("nan")

    @property
    def gamma_hat(self) -> float:
        """-sup Vdot over steps driven by the equilibrium policy alone."""
        vals = [vd for vd, a in zip(self.Vdot, self.applied) if not a]
        return -max(vals) if vals else float("nan")


@dataclass
class BoundReport:
    margins: list
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def lyapunov_bound_check(trace: LyapunovTrace, eps_int: float = 1e-3) -> BoundReport:
    """V(x) - V_baseline <= lambda * beta_hat + eps_int at the end of every applied window."""
    margins = [w.margin(eps_int) for w in trace.windows]
    violations = [w for w, mg in zip(trace.windows, margins) if mg < 0.0]
    return BoundReport(margins, violations)


class LyapunovMonitor:
    """Builds a ``LyapunovTrace`` while an episode runs on the true plant.

    Consecutive steps with the exploration offset active form one window; the
    paired baseline restarts ``mu`` alone from the window's first state.  The
    window's beta is the largest ``dV/dx (f(x, u_applied) - f(x, mu(x)))`` seen
    at the start and end state of each of its steps, with saturation included.
    """

    def __init__(self, plant: ControlAffineSystem, cert: StabilityCertificate, dt: float):
        self.plant = plant
        self.cert = cert
        self.dt = dt
        self.trace = LyapunovTrace()
        self._open = None
        self._last = None  # offset used on the previous step, if it was inside a window

    def beta(self, x, offset) -> float:
        x = np.asarray(x, float)
        mu = self.cert.policy(x)
        du = self.plant.saturate(mu + offset) - self.plant.saturate(mu)
        return float(lyapunov_gradient(self.cert, x) @ self.plant.gh(x)[1] @ du)

    def observe(self, k: int, t: float, x, offset, window: bool = True) -> None:
        """Record step ``k``; ``window=False`` treats a non-None offset as plain disturbance."""
        x = np.asarray(x, float)
        if self._open is not None and self._last is not None:
            self._open["beta"] = max(self._open["beta"], self.beta(x, self._last))
        u = self.plant.saturate(self.cert.policy(x) if offset is None else self.cert.policy(x) + offset)
        self.trace.V.append(lyapunov_value(self.cert, x))
        self.trace.Vdot.append(lyapunov_rate(self.cert, self.plant, x, u))
        if not window:
            offset = None
        self.trace.applied.append(offset is not None)
        self._last = offset
        if offset is None:
            self.trace.beta.append(float("nan"))
            self._close(k, x)
            return
        beta = self.beta(x, offset)
        self.trace.beta.append(beta)
        if self._open is None:
            self._open = {"start": k, "t": t, "x": x.copy(), "beta": beta}
        else:
            self._open["beta"] = max(self._open["beta"], beta)

    def finish(self, k: int, x) -> LyapunovTrace:
        x = np.asarray(x, float)
        if self._open is not None and self._last is not None:
            self._open["beta"] = max(self._open["beta"], self.beta(x, self._last))
        self._last = None
        self._close(k, x)
        return self.trace

    def _close(self, k: int, x) -> None:
        if self._open is None:
            return
        w = self._open
        self._open = None
        steps = k - w["start"]
        base = rollout_policy(self.plant, self.cert, w["x"], TimeGrid(w["t"], self.dt, steps))
        beta_hat = w["beta"] if not self.trace.windows else max(self.trace.beta_hat, w["beta"])
        self.trace.windows.append(WindowRecord(
            start=w["start"], stop=k, t_start=w["t"], duration=steps * self.dt, beta=w["beta"], beta_hat=beta_hat,
            V_end=lyapunov_value(self.cert, x), V_base_end=lyapunov_value(self.cert, base.x[-1]),
        ))
