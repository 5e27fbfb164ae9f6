"""Randomized planning instances and an independent insertion oracle."""
from dataclasses import dataclass

import numpy as np

from eqexplore.controller import (PlanObjective, integrate_adjoint, insertion_gradients, exploration_offsets,
                                  policy_controls, quadratic_task, rollout_policy)
from eqexplore.coverage import CoverageObjective, CoverageState, SearchDomain, default_sigma, make_sample_set
from eqexplore.ode import TimeGrid, Trajectory, rk4_step
from eqexplore.stabilizer import estimate_attraction_radius, lqr_certificate
from eqexplore.systems import (CartDoublePendulumParams, make_cart_double_pendulum, make_double_integrator,
                               make_linear_system, make_pendulum)

# criterion number -> (passed, detail); filled by test_acceptance.py
CRITERIA = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


PLANTS = ("linear", "double-integrator", "pendulum", "cart-double-pendulum")


def make_plant(kind, rng):
    if kind == "linear":
        n, m = int(rng.integers(2, 5)), int(rng.integers(1, 3))
        return make_linear_system(rng.standard_normal((n, n)), rng.standard_normal((n, m)))
    if kind == "double-integrator":
        return make_double_integrator()
    if kind == "pendulum":
        return make_pendulum()
    return make_cart_double_pendulum(CartDoublePendulumParams(force_limit=1e6))


@dataclass
class Instance:
    sys: object
    cert: object
    task: object
    objective: PlanObjective
    grid: TimeGrid
    x_init: np.ndarray
    nominal: Trajectory
    J0: float
    adj: object
    R_reg: np.ndarray
    offsets: np.ndarray
    mu_star: np.ndarray
    djdlam: np.ndarray


def planning_instance(kind, seed, dt=0.005, horizon=0.3, offset_size=None, n_samples=50):
    """One planning cycle on a random instance.

    The initial state lies inside half the estimated attraction radius, the
    task is a random quadratic, and the coverage domain spans the first two
    state coordinates.  With ``offset_size`` the regularizer is scaled so that
    the largest exploration offset has that magnitude.
    """
    rng = np.random.default_rng(seed)
    sys = make_plant(kind, rng)
    cert = lqr_certificate(sys)
    r = min(estimate_attraction_radius(cert, sys, 100), 1.0)
    task = quadratic_task(np.diag(rng.uniform(0.5, 2.0, sys.n)), rng.uniform(0.1, 1.0) * np.eye(sys.m),
                          Qf=np.eye(sys.n), x_ref=rng.normal(0.0, 0.3, sys.n))
    domain = SearchDomain(-np.ones(2), np.ones(2), (0, 1), sys.n, sys.m)
    cov = CoverageState(default_sigma(domain, 0.2), t_r=0.0, horizon=horizon)
    grid = TimeGrid(0.0, dt, int(round(horizon / dt)))
    d = rng.standard_normal(sys.n)
    x_init = 0.5 * r * rng.random() * d / np.linalg.norm(d)
    samples = make_sample_set(domain, domain.sample_uniform(rng, n_samples), rng.random(n_samples))
    nominal = rollout_policy(sys, cert, x_init, grid)
    plain = PlanObjective(cert, task, domain, None)
    coverage = CoverageObjective(cov, domain, samples, 0.0, grid.times, plain.domain_points(nominal))
    objective = PlanObjective(cert, task, domain, coverage)
    adj = integrate_adjoint(sys, cert, task, objective, nominal)
    if offset_size is None:
        R_reg = rng.uniform(0.2, 5.0) * np.eye(sys.m)
    else:
        unit = exploration_offsets(sys, adj, nominal, np.eye(sys.m))
        R_reg = np.max(np.abs(unit)) / offset_size * np.eye(sys.m)
    offsets = exploration_offsets(sys, adj, nominal, R_reg)
    mu_star = policy_controls(cert, nominal.x) + offsets
    djdlam = insertion_gradients(sys, cert, adj, nominal, mu_star)
    return Instance(sys, cert, task, objective, grid, x_init, nominal, objective(nominal), adj, R_reg,
                    offsets, mu_star, djdlam)


def insert_schedule(inst: Instance, k: int, steps: int) -> Trajectory:
    """Re-simulate with mu* inserted over grid steps ``k .. k+steps-1``.

    Inside the window the plant receives ``mu(x) + d(t)`` where ``d`` is the
    exploration offset interpolated linearly between grid samples, i.e. the
    schedule as a continuous signal rather than a per-step hold.
    """
    sys, cert, grid, off = inst.sys, inst.cert, inst.grid, inst.offsets
    X = inst.nominal.x.copy()

    def burst(j):
        def field(t, x):
            a = (t - grid.time(j)) / grid.dt
            return sys.f(x, cert.policy(x) + (1.0 - a) * off[j] + a * off[j + 1])
        return field

    def plain(t, x):
        return sys.f(x, cert.policy(x))

    for j in range(k, grid.n_steps):
        X[j + 1] = rk4_step(burst(j) if j < k + steps else plain, grid.time(j), X[j], grid.dt)
    return Trajectory(grid, X, inst.nominal.u)
