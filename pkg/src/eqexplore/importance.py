"""Capacity-limited RBF dictionary: importance measure, GP predictions, importance distribution.

The importance of a candidate input ``x`` against the stored inputs is

    delta(x) = k(x, x) - k_x' K^-1 k_x

i.e. the squared residual of projecting its feature vector onto the span of
the stored features.  It is also the GP posterior variance at ``x``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)


class EmptyDictionary(ValueError):
    pass


class IllConditioned(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RbfKernel:
    lengthscale: object = 1.0  # scalar or per-dimension sequence
    signal_var: float = 1.0
    jitter: Optional[float] = None

    def __post_init__(self):
        ls = np.asarray(self.lengthscale, dtype=float)
        if np.any(ls <= 0) or self.signal_var <= 0:
            raise ValueError("lengthscale and signal variance must be positive")
        if self.jitter is None:
            object.__setattr__(self, "jitter", 1e-6 * self.signal_var)

    def __call__(self, X, Y) -> np.ndarray:
        ls = np.asarray(self.lengthscale, dtype=float)
        X = np.atleast_2d(np.asarray(X, float)) / ls
        Y = np.atleast_2d(np.asarray(Y, float)) / ls
        d2 = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
        return self.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))

    def to_dict(self) -> dict:
        ls = np.asarray(self.lengthscale, dtype=float)
        return {"lengthscale": ls.tolist() if ls.ndim else float(ls),
                "signal_var": float(self.signal_var), "jitter": float(self.jitter)}


@dataclass(frozen=True)
class InsertOutcome:
    kind: str  # "inserted" | "replaced" | "rejected"
    index: Optional[int]
    delta: float


@dataclass(eq=False)
class GpDictionary:
    """Sparse-GP data set of at most ``capacity`` input/output pairs.

    ``K_inv`` is maintained by block-inverse updates (insert) and Schur
    downdates (evict); any update whose ``K @ K_inv`` drifts more than
    ``verify_tol`` from the identity is redone by direct inversion.
    """

    kernel: RbfKernel
    capacity: int
    input_dim: int
    output_dim: int
    verify_tol: float = 1e-6
    X: np.ndarray = field(init=False)
    Y: np.ndarray = field(init=False)
    K: np.ndarray = field(init=False)
    K_inv: np.ndarray = field(init=False)
    deltas: np.ndarray = field(init=False)
    refactorizations: int = field(init=False, default=0)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        self.X = np.empty((0, self.input_dim))
        self.Y = np.empty((0, self.output_dim))
        self.K = np.empty((0, 0))
        self.K_inv = np.empty((0, 0))
        self.deltas = np.empty(0)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    # -- importance ---------------------------------------------------------
    def importance(self, x) -> float:
        return float(self.importance_many(np.atleast_2d(x))[0])

    def importance_many(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, float))
        prior = np.full(P.shape[0], self.kernel.signal_var)
        if len(self) == 0:
            return prior
        k = self.kernel(P, self.X)
        return np.maximum(prior - np.einsum("ij,jk,ik->i", k, self.K_inv, k), 0.0)

    def min_importance(self) -> float:
        return float(self.deltas.min()) if len(self) else float("nan")

    def loo_importance(self) -> np.ndarray:
        """Each stored point's importance against the other stored points, by direct solves."""
        m = len(self)
        out = np.empty(m)
        for i in range(m):
            rest = np.delete(np.arange(m), i)
            if rest.size == 0:
                out[i] = self.kernel.signal_var
                continue
            Kr = self.K[np.ix_(rest, rest)]
            k = self.K[rest, i]
            out[i] = max(self.kernel.signal_var - k @ np.linalg.solve(Kr, k), 0.0)
        return out

    # -- mutation -----------------------------------------------------------
    def _refresh_deltas(self):
        d = np.diag(self.K_inv)
        self.deltas = np.maximum(1.0 / d - self.kernel.jitter, 0.0)

    def _verify_or_refactor(self):
        m = len(self)
        if m == 0:
            return
        err = np.max(np.abs(self.K @ self.K_inv - np.eye(m)))
        if not np.isfinite(err) or err > self.verify_tol:
            self.refactorizations += 1
            self.K_inv = np.linalg.inv(self.K)
            self.K_inv = 0.5 * (self.K_inv + self.K_inv.T)
            err = np.max(np.abs(self.K @ self.K_inv - np.eye(m)))
            if err > self.verify_tol:
                raise IllConditioned(f"kernel matrix inverse residual {err:.3g} after refactorization")

    def _augmented(self, x):
        """Kernel matrix and inverse with ``x`` appended (block-inverse update)."""
        kern = self.kernel
        kappa = kern.signal_var + kern.jitter
        m = len(self)
        if m == 0:
            return np.array([[kappa]]), np.array([[1.0 / kappa]])
        k = kern(self.X, x[None, :])[:, 0]
        a = self.K_inv @ k
        s = kappa - k @ a
        K_new = np.empty((m + 1, m + 1))
        K_new[:m, :m] = self.K
        K_new[:m, m] = K_new[m, :m] = k
        K_new[m, m] = kappa
        Ki = np.empty((m + 1, m + 1))
        Ki[:m, :m] = self.K_inv + np.outer(a, a) / s
        Ki[:m, m] = Ki[m, :m] = -a / s
        Ki[m, m] = 1.0 / s
        return K_new, Ki

    @staticmethod
    def _downdate(K_inv, j):
        keep = np.delete(np.arange(K_inv.shape[0]), j)
        b = K_inv[keep, j]
        return K_inv[np.ix_(keep, keep)] - np.outer(b, b) / K_inv[j, j]

    def try_insert(self, x, y) -> InsertOutcome:
        """Insert ``(x, y)``; when full, keep the size-M subset with the largest minimum importance.

        If even a direct inverse of the updated kernel matrix fails verification
        the dictionary is left unchanged and the point is rejected.
        """
        x = np.asarray(x, float).reshape(self.input_dim)
        y = np.asarray(y, float).reshape(self.output_dim)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite data point")
        saved = (self.X, self.Y, self.K, self.K_inv, self.deltas)
        try:
            return self._insert(x, y)
        except IllConditioned as err:
            log.warning("rejecting data point: %s", err)
            self.X, self.Y, self.K, self.K_inv, self.deltas = saved
            return InsertOutcome("rejected", None, self.importance(x))

    def _insert(self, x, y) -> InsertOutcome:
        delta = self.importance(x)
        m = len(self)
        if m < self.capacity:
            self.K, self.K_inv = self._augmented(x)
            self.X = np.vstack([self.X, x])
            self.Y = np.vstack([self.Y, y])
            self._verify_or_refactor()
            self._refresh_deltas()
            return InsertOutcome("inserted", m, delta)
        # Every size-M subset of the M+1 candidates drops exactly one point;
        # keep the one whose minimum leave-one-out importance is largest.
        # Dropping the new point is the rejection outcome.
        K_aug, Ki_aug = self._augmented(x)
        # leave-one-out importances of point i after removing point j
        diag = np.diag(Ki_aug)
        D = diag[None, :] - Ki_aug ** 2 / diag[:, None]
        with np.errstate(divide="ignore"):
            loo = 1.0 / D - self.kernel.jitter
        np.fill_diagonal(loo, np.inf)
        score = loo.min(axis=1)
        evict = int(np.argmax(score))
        # ties go to rejection so an equally good dictionary is left untouched
        if evict == m or score[m] >= score[evict] - 1e-12 * max(1.0, abs(score[evict])):
            return InsertOutcome("rejected", None, delta)
        keep = np.delete(np.arange(m + 1), evict)
        self.K = K_aug[np.ix_(keep, keep)]
        self.K_inv = self._downdate(Ki_aug, evict)
        X_aug = np.vstack([self.X, x])
        Y_aug = np.vstack([self.Y, y])
        self.X, self.Y = X_aug[keep], Y_aug[keep]
        self._verify_or_refactor()
        self._refresh_deltas()
        return InsertOutcome("replaced", evict, delta)

    # -- regression ---------------------------------------------------------
    def predict(self, points):
        """GP posterior mean ``(q, c)`` and variance ``(q,)``; variance equals the importance."""
        if len(self) == 0:
            raise EmptyDictionary("cannot predict from an empty dictionary")
        P = np.atleast_2d(np.asarray(points, float))
        k = self.kernel(P, self.X)
        mean = k @ (self.K_inv @ self.Y)
        var = np.maximum(self.kernel.signal_var - np.einsum("ij,jk,ik->i", k, self.K_inv, k), 0.0)
        return mean, var

    def importance_distribution(self, points) -> np.ndarray:
        w = self.importance_many(points)
        if np.all(w < 1e-12):
            return np.full(w.size, 1.0 / w.size)
        return w / w.sum()

    # -- persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "capacity": self.capacity,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "inputs": self.X.tolist(),
            "outputs": self.Y.tolist(),
            "importance": self.deltas.tolist(),
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "GpDictionary":
        kern = RbfKernel(**data["kernel"])
        d = cls(kern, int(data["capacity"]), int(data["input_dim"]), int(data["output_dim"]))
        X = np.asarray(data["inputs"], float).reshape(-1, d.input_dim)
        Y = np.asarray(data["outputs"], float).reshape(-1, d.output_dim)
        if X.shape[0]:
            d.X, d.Y = X, Y
            d.K = kern(X, X) + kern.jitter * np.eye(X.shape[0])
            d.K_inv = np.linalg.inv(d.K)
            d._refresh_deltas()
        return d

    @classmethod
    def from_json(cls, path) -> "GpDictionary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def importance(dictionary: GpDictionary, x_new) -> float:
    return dictionary.importance(x_new)


def try_insert(dictionary: GpDictionary, x_new, y_new) -> InsertOutcome:
    return dictionary.try_insert(x_new, y_new)


def gp_predict(dictionary: GpDictionary, x_query):
    return dictionary.predict(x_query)


def importance_distribution(dictionary: GpDictionary, sample_points) -> np.ndarray:
    return dictionary.importance_distribution(sample_points)
