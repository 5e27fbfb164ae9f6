"""Time-averaged trajectory statistics and the sampled KL coverage objective.

q(s) = eta / T_r * integral exp(-1/2 (s - x_v(t))' Sigma^-1 (s - x_v(t))) dt

over the remembered past and the planned horizon.  The KL estimate uses
self-normalised weights p_i (summing to one) for the expectation and
converts them to densities, p_i / cell_volume, inside the logarithm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Q_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class SearchDomain:
    """Axis-aligned box over selected coordinates of the stacked vector ``(x, u)``.

    ``x_v = (x, u)[indices] - offset``.
    """

    lo: np.ndarray
    hi: np.ndarray
    indices: tuple
    n: int
    m: int
    offset: np.ndarray = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, float))
        hi = np.atleast_1d(np.asarray(self.hi, float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        off = np.zeros(lo.size) if self.offset is None else np.asarray(self.offset, float).reshape(lo.size)
        object.__setattr__(self, "offset", off)
        if lo.size != hi.size or lo.size != len(self.indices):
            raise ValueError("bounds and indices must agree in dimension")
        if not np.all(lo < hi):
            raise ValueError("lo must be strictly below hi")
        if lo.size > self.n + self.m or any(not 0 <= i < self.n + self.m for i in self.indices):
            raise ValueError("domain coordinates must select from (x, u)")
        sel = np.zeros((lo.size, self.n + self.m))
        sel[np.arange(lo.size), list(self.indices)] = 1.0
        object.__setattr__(self, "_sel", sel)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def state_selector(self) -> np.ndarray:
        return self._sel[:, : self.n]

    @property
    def control_selector(self) -> np.ndarray:
        return self._sel[:, self.n:]

    def project(self, x, u) -> np.ndarray:
        """Map states ``(..., n)`` and controls ``(..., m)`` to domain points ``(..., v)``."""
        z = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1)
        return z[..., list(self.indices)] - self.offset

    def projection_jacobian(self, policy_jac: np.ndarray) -> np.ndarray:
        """d x_v / d x when the control coordinates follow a policy with Jacobian ``policy_jac``."""
        return self.state_selector + self.control_selector @ policy_jac

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def sample_uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))


def default_sigma(domain: SearchDomain, scale: float = 0.1) -> np.ndarray:
    """Diagonal width matrix, standard deviation ``scale`` times each domain width."""
    return np.diag((scale * domain.widths) ** 2)


@dataclass(eq=False)
class CoverageState:
    """Remembered domain points over ``[t - t_r, t)`` and the Gaussian width ``Sigma``.

    The buffer keeps every appended point until ``capacity`` is exceeded, then
    drops every other point (oldest first) so its span is preserved.
    """

    sigma: np.ndarray
    t_r: float
    horizon: float
    capacity: int = 2000
    times: list = field(default_factory=list)
    points: list = field(default_factory=list)

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, float))
        if not np.allclose(self.sigma, self.sigma.T):
            raise ValueError("Sigma must be symmetric")
        if np.min(np.linalg.eigvalsh(self.sigma)) <= 0:
            raise ValueError("Sigma must be positive definite")
        self.sigma_inv = np.linalg.inv(self.sigma)

    @property
    def T_r(self) -> float:
        return self.horizon + self.t_r

    def append(self, t: float, x_v) -> None:
        if self.times and not t > self.times[-1]:
            raise ValueError("buffer timestamps must strictly increase")
        self.times.append(float(t))
        self.points.append(np.asarray(x_v, float).copy())
        cutoff = t - self.t_r
        while self.times and self.times[0] < cutoff:
            self.times.pop(0)
            self.points.pop(0)
        if len(self.times) > self.capacity:
            keep = list(range(len(self.times) - 1, -1, -2))[::-1]
            self.times = [self.times[i] for i in keep]
            self.points = [self.points[i] for i in keep]

    def memory(self, t_now: float):
        """Buffered ``(times, points)`` strictly before ``t_now`` and within ``t_r``."""
        sel = [i for i, t in enumerate(self.times) if t_now - self.t_r <= t < t_now]
        if not sel:
            return np.empty(0), np.empty((0, self.sigma.shape[0]))
        return np.array([self.times[i] for i in sel]), np.array([self.points[i] for i in sel])


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray
    weights: np.ndarray  # self-normalised, sum to one
    cell_volume: float   # domain volume / N

    @property
    def densities(self) -> np.ndarray:
        return self.weights / self.cell_volume


def make_sample_set(domain: SearchDomain, points, weights) -> SampleSet:
    points = np.atleast_2d(np.asarray(points, float))
    w = np.asarray(weights, float).reshape(points.shape[0])
    if np.any(w < 0):
        raise ValueError("importance weights must be non-negative")
    total = w.sum()
    w = np.full(w.size, 1.0 / w.size) if total <= 0 else w / total
    return SampleSet(points, w, domain.volume / points.shape[0])


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, float)
    w = np.zeros(times.size)
    if times.size < 2:
        return w
    dt = np.diff(times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def gaussian_kernel(sigma_inv: np.ndarray, pts: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """exp(-1/2 (s - x)' Sigma^-1 (s - x)) for every (trajectory point, sample) pair -> (K, N)."""
    d = samples[None, :, :] - pts[:, None, :]
    return np.exp(-0.5 * np.einsum("kni,ij,knj->kn", d, sigma_inv, d))


def footprint(cov: CoverageState, times, pts, samples) -> np.ndarray:
    """Trapezoidal time integral of the Gaussian footprint at each sample."""
    G = gaussian_kernel(cov.sigma_inv, np.atleast_2d(pts), np.atleast_2d(samples))
    return trapezoid_weights(times) @ G


def normalizer(cov: CoverageState, integrals: np.ndarray, volume: float) -> float:
    """eta such that the Monte Carlo estimate of the integral of q over the domain is 1."""
    mean = max(float(np.mean(integrals)), 1e-300)
    return cov.T_r / (volume * mean)


class CoverageObjective:
    """Sampled KL term for one planning cycle.

    The memory buffer, the samples and ``eta`` are frozen at construction, so
    the KL becomes a function of the planned domain points only.
    """

    def __init__(self, cov: CoverageState, domain: SearchDomain, samples: SampleSet, t_now: float,
                 nominal_times, nominal_pts, eta: float | None = None):
        self.cov = cov
        self.domain = domain
        self.samples = samples
        self.mem_t, self.mem_pts = cov.memory(t_now)
        nominal_times = np.asarray(nominal_times, float)
        I = self.integrals(nominal_times, nominal_pts)
        self.eta = normalizer(cov, I, domain.volume) if eta is None else float(eta)
        self.scale = self.eta / cov.T_r
        self.q_nominal = self.scale * I + Q_FLOOR

    def integrals(self, plan_times, plan_pts) -> np.ndarray:
        t = np.concatenate([self.mem_t, np.asarray(plan_times, float)])
        pts = np.vstack([self.mem_pts.reshape(-1, self.domain.dim), np.atleast_2d(plan_pts)])
        return footprint(self.cov, t, pts, self.samples.points)

    def q(self, plan_times, plan_pts) -> np.ndarray:
        return self.scale * self.integrals(plan_times, plan_pts) + Q_FLOOR

    def kl(self, plan_times, plan_pts) -> float:
        return kl_from_q(self.samples, self.q(plan_times, plan_pts))

    def gradient_density(self, pts, q=None) -> np.ndarray:
        """sum_i (p_i / q_i)(eta / T_r) d/dx_v exp(...) at each point -> (K, v)."""
        q = self.q_nominal if q is None else q
        return costate_density(self.cov.sigma_inv, self.samples, q, self.scale, np.atleast_2d(pts))


def kl_from_q(samples: SampleSet, q: np.ndarray) -> float:
    w = samples.weights
    nz = w > 0
    return float(np.sum(w[nz] * (np.log(samples.densities[nz]) - np.log(q[nz]))))


def costate_density(sigma_inv, samples: SampleSet, q, scale, pts) -> np.ndarray:
    G = gaussian_kernel(sigma_inv, pts, samples.points)          # (K, N)
    W = G * (samples.weights / q * scale)[None, :]
    diff = W @ samples.points - W.sum(axis=1, keepdims=True) * pts  # sum_i W_ki (s_i - x_k)
    return diff @ sigma_inv.T


def q_eval(cov: CoverageState, domain: SearchDomain, plan_times, plan_pts, s, t_now: float | None = None,
           eta_samples=None) -> np.ndarray:
    """q at domain points ``s`` (floored), normalised over ``eta_samples`` (default: ``s``)."""
    s = np.atleast_2d(np.asarray(s, float))
    ref = s if eta_samples is None else np.atleast_2d(eta_samples)
    t_now = float(np.asarray(plan_times)[0]) if t_now is None else t_now
    mem_t, mem_pts = cov.memory(t_now)
    t = np.concatenate([mem_t, np.asarray(plan_times, float)])
    pts = np.vstack([mem_pts.reshape(-1, domain.dim), np.atleast_2d(plan_pts)])
    eta = normalizer(cov, footprint(cov, t, pts, ref), domain.volume)
    return eta / cov.T_r * footprint(cov, t, pts, s) + Q_FLOOR


def kl_estimate(samples: SampleSet, cov: CoverageState, domain: SearchDomain, plan_times, plan_pts,
                t_now: float | None = None) -> float:
    q = q_eval(cov, domain, plan_times, plan_pts, samples.points, t_now)
    return kl_from_q(samples, q)


def coverage_costate_term(samples: SampleSet, cov: CoverageState, domain: SearchDomain, plan_times, plan_pts,
                          k: int, policy_jac: np.ndarray, t_now: float | None = None) -> np.ndarray:
    """Coverage forcing of the adjoint at plan index ``k``, chained to state coordinates (n-vector)."""
    obj = CoverageObjective(cov, domain, samples, float(np.asarray(plan_times)[0]) if t_now is None else t_now,
                            plan_times, plan_pts)
    g_v = obj.gradient_density(np.atleast_2d(plan_pts)[k])[0]
    return domain.projection_jacobian(policy_jac).T @ g_v
