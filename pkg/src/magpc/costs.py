"""Convex per-round cost oracles and the regularity constants the tuning rules read."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .lds import stream_values


@dataclass(frozen=True)
class CostConstants:
    beta: float
    G: float
    Lbar: float | None = None
    zeta: float | None = None
    c_inf: float | None = None


@dataclass
class QuadParams:
    """Per-round coefficients of qx|x-a|^2 + <hx,x> + qu|u-b|^2 + <h,u> + e.

    This family covers every built-in oracle and is what the compiled loop consumes.
    """

    qx: float
    a: np.ndarray
    hx: np.ndarray
    qu: float
    b: np.ndarray
    h: np.ndarray
    e: np.ndarray


class _Signal:
    """Target sequence: zero, a constant vector, an explicit array, or any object with `values(ts)`."""

    def __init__(self, src, dim):
        self.dim = dim
        self.src = src
        if src is None:
            self.const = np.zeros(dim)
        elif hasattr(src, "values"):
            self.const = None
        else:
            arr = np.asarray(src, dtype=float)
            if arr.ndim <= 1:
                arr = np.broadcast_to(arr, (dim,)).astype(float)
                self.const = arr
            else:
                if arr.shape[1] != dim:
                    raise DimensionError(f"target sequence must have {dim} columns")
                self.const = None
                self.src = arr

    @property
    def time_invariant(self):
        return self.const is not None or bool(getattr(self.src, "time_invariant", False))

    def at(self, t):
        if self.const is not None:
            return self.const
        if isinstance(self.src, np.ndarray):
            return self.src[t]
        return self.src.values([t])[0]

    def values(self, ts):
        ts = np.asarray(ts, dtype=np.int64).reshape(-1)
        if self.const is not None:
            return np.tile(self.const, (ts.size, 1))
        if isinstance(self.src, np.ndarray):
            return self.src[ts]
        return np.asarray(self.src.values(ts), dtype=float).reshape(ts.size, self.dim)

    def sup_norm(self):
        if self.const is not None:
            return float(np.linalg.norm(self.const))
        if isinstance(self.src, np.ndarray):
            return float(np.linalg.norm(self.src, axis=1).max(initial=0.0))
        return float(self.src.sup_norm())


class CostOracle:
    d: int
    k: int
    time_invariant = False

    def value(self, t, x, u) -> float:
        return self.eval(t, x, u)[0]

    def grad(self, t, x, u):
        _, gx, gu = self.eval(t, x, u)
        return gx, gu

    def grad_x(self, t, x, u):
        return self.grad(t, x, u)[0]

    def grad_u(self, t, x, u):
        return self.grad(t, x, u)[1]

    def eval(self, t, x, u):
        raise NotImplementedError

    def values(self, ts, X, U) -> np.ndarray:
        return np.array([self.value(int(t), x, u) for t, x, u in zip(ts, X, U)])

    def constants(self, D: float) -> CostConstants:
        raise NotImplementedError

    def quad_params(self, T: int) -> QuadParams | None:
        return None

    def _check(self, x, u):
        x = np.asarray(x, float).reshape(-1)
        u = np.asarray(u, float).reshape(-1)
        if x.shape[0] != self.d or u.shape[0] != self.k:
            raise DimensionError(f"cost expects x in R^{self.d}, u in R^{self.k}; got {x.shape[0]}, {u.shape[0]}")
        return x, u


class QuadraticTracking(CostOracle):
    """|x - a_t|^2 + lam |u - b_t|^2."""

    def __init__(self, d, k, lam=1.0, target_x=None, target_u=None):
        if lam < 0:
            raise ValueError("lam must be non-negative")
        self.d, self.k, self.lam = int(d), int(k), float(lam)
        self.a = _Signal(target_x, self.d)
        self.b = _Signal(target_u, self.k)

    @property
    def time_invariant(self):
        return self.a.time_invariant and self.b.time_invariant

    def eval(self, t, x, u):
        x, u = self._check(x, u)
        ex = x - self.a.at(t)
        eu = u - self.b.at(t)
        val = float(ex @ ex + self.lam * (eu @ eu))
        return val, 2.0 * ex, 2.0 * self.lam * eu

    def values(self, ts, X, U):
        ex = np.asarray(X) - self.a.values(ts)
        eu = np.asarray(U) - self.b.values(ts)
        return np.einsum("ij,ij->i", ex, ex) + self.lam * np.einsum("ij,ij->i", eu, eu)

    def sup_target(self):
        return max(self.a.sup_norm(), self.b.sup_norm())

    def constants(self, D):
        s = 1.0 + self.sup_target() / D
        m = max(1.0, self.lam)
        return CostConstants(beta=(1.0 + self.lam) * s * s, G=2.0 * m * s, Lbar=None, zeta=2.0 * m, c_inf=0.0)

    def quad_params(self, T):
        ts = np.arange(T)
        return QuadParams(qx=1.0, a=self.a.values(ts), hx=np.zeros((T, self.d)), qu=self.lam,
                          b=self.b.values(ts), h=np.zeros((T, self.k)), e=np.zeros(T))

    def delta_closed_form(self, t, D):
        a0, a1 = self.a.at(t), self.a.at(t + 1)
        b0, b1 = self.b.at(t), self.b.at(t + 1)
        dx = 2 * D * np.linalg.norm(a1 - a0) + a1 @ a1 - a0 @ a0
        du = 2 * D * np.linalg.norm(b1 - b0) + b1 @ b1 - b0 @ b0
        return float(dx + self.lam * du)


class LowerBoundCost(CostOracle):
    """u (b_t - 1/2) + 1/2 with b_t an i.i.d. Bernoulli(p) sequence; ignores the state."""

    def __init__(self, seed=0, probability=0.5, d=1, bits=None):
        self.d, self.k = int(d), 1
        self.seed, self.p = int(seed), float(probability)
        self._bits = None if bits is None else np.asarray(bits, dtype=float).reshape(-1)

    def bits(self, ts):
        ts = np.asarray(ts, dtype=np.int64).reshape(-1)
        if self._bits is not None:
            return self._bits[ts]
        return (stream_values(self.seed, ts, 1)[:, 0] < self.p).astype(float)

    def eval(self, t, x, u):
        x, u = self._check(x, u)
        s = self.bits([t])[0] - 0.5
        return float(u[0] * s + 0.5), np.zeros(self.d), np.array([s])

    def values(self, ts, X, U):
        return np.asarray(U)[:, 0] * (self.bits(ts) - 0.5) + 0.5

    def constants(self, D):
        return CostConstants(beta=(D + 1.0) / (2 * D * D), G=0.5 / D, Lbar=0.5, zeta=0.0, c_inf=None)

    def quad_params(self, T):
        return QuadParams(qx=0.0, a=np.zeros((T, self.d)), hx=np.zeros((T, self.d)), qu=0.0,
                          b=np.zeros((T, 1)), h=(self.bits(np.arange(T)) - 0.5)[:, None], e=np.full(T, 0.5))


class LinearCost(CostOracle):
    """<g_x, x> + <g_u, u> + c0, time-invariant."""

    time_invariant = True

    def __init__(self, g_x, g_u, c0=0.0):
        self.g_x = np.asarray(g_x, float).reshape(-1)
        self.g_u = np.asarray(g_u, float).reshape(-1)
        self.d, self.k, self.c0 = self.g_x.size, self.g_u.size, float(c0)

    def eval(self, t, x, u):
        x, u = self._check(x, u)
        return float(self.g_x @ x + self.g_u @ u + self.c0), self.g_x.copy(), self.g_u.copy()

    def values(self, ts, X, U):
        return np.asarray(X) @ self.g_x + np.asarray(U) @ self.g_u + self.c0

    def constants(self, D):
        gx, gu = np.linalg.norm(self.g_x), np.linalg.norm(self.g_u)
        return CostConstants(beta=(gx + gu) / D + abs(self.c0) / D**2, G=max(gx, gu) / D,
                             Lbar=max(gx, gu), zeta=0.0, c_inf=None)

    def quad_params(self, T):
        return QuadParams(qx=0.0, a=np.zeros((T, self.d)), hx=np.tile(self.g_x, (T, 1)), qu=0.0,
                          b=np.zeros((T, self.k)), h=np.tile(self.g_u, (T, 1)), e=np.full(T, self.c0))


def evaluate(oracle: CostOracle, t, x, u):
    """(value, grad_x, grad_u) at round t."""
    return oracle.eval(t, x, u)


def _sphere(rng, n, dim, radius):
    z = rng.standard_normal((n, dim))
    return radius * z / np.linalg.norm(z, axis=1, keepdims=True)


def delta_cost(oracle: CostOracle, t: int, D: float, samples: int = 10_000, seed: int = 0):
    """max over |x|,|u| <= D of c_{t+1} - c_t, as (value, is_estimate)."""
    if D <= 0:
        raise ValueError("D must be positive")
    if oracle.time_invariant:
        return 0.0, False
    if isinstance(oracle, QuadraticTracking):
        return oracle.delta_closed_form(t, D), False
    return sampled_delta_cost(oracle, t, D, samples, seed), True


def sampled_delta_cost(oracle, t, D, samples=10_000, seed=0):
    rng = np.random.default_rng(seed)
    X = _sphere(rng, samples, oracle.d, D)
    U = _sphere(rng, samples, oracle.k, D)
    diff = oracle.values(np.full(samples, t + 1), X, U) - oracle.values(np.full(samples, t), X, U)
    return float(diff.max())
