"""Fixed-step integration and finite-difference Jacobians."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

VectorField = Callable[[float, np.ndarray], np.ndarray]

DEFAULT_DT = 1.0 / 200.0
DEFAULT_EPS = 1e-5


class IntegrationDiverged(FloatingPointError):
    """Raised when an integration step produces non-finite values."""

    def __init__(self, t: float, x: np.ndarray, step: int | None = None):
        self.t = t
        self.x = np.array(x, copy=True)
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"integration diverged{where} (t={t:.6g})")


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def __len__(self) -> int:
        return self.n_steps + 1

    def time(self, k: int) -> float:
        # multiplication, not accumulation: no drift over long grids
        return self.t_start + k * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    @property
    def t_end(self) -> float:
        return self.time(self.n_steps)


def rk4_step(field: VectorField, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``dx/dt = field(t, x)``."""
    k1 = field(t, x)
    k2 = field(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = field(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = field(t + dt, x + dt * k3)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationDiverged(t, x)
    return x_next


def integrate(field: VectorField, grid: TimeGrid, x0) -> np.ndarray:
    """Integrate over ``grid``; returns an ``(n_steps + 1, n)`` array with row 0 == x0."""
    x0 = np.asarray(x0, dtype=float)
    out = np.empty((grid.n_steps + 1, x0.size))
    out[0] = x0
    for k in range(grid.n_steps):
        try:
            out[k + 1] = rk4_step(field, grid.time(k), out[k], grid.dt)
        except IntegrationDiverged as err:
            raise IntegrationDiverged(err.t, err.x, step=k) from None
    return out


def finite_diff_jacobian(fn: Callable[[np.ndarray], np.ndarray], x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference Jacobian of a vector map at ``x``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = eps
        fp = np.atleast_1d(np.asarray(fn(x + step), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(x - step), dtype=float))
        cols.append((fp - fm) / (2.0 * eps))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States and applied controls on a uniform grid; ``u[k]`` acts over ``[t_k, t_k+1)``."""

    grid: TimeGrid
    x: np.ndarray  # (n_steps + 1, n)
    u: np.ndarray  # (n_steps + 1, m); last row is the control the law would apply at t_end

    @property
    def t(self) -> np.ndarray:
        return self.grid.times

    def __len__(self) -> int:
        return self.x.shape[0]
