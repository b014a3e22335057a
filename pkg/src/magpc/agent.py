"""Per-agent online gradient perturbation controller, step-size/memory rules, and OGD with memory."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .counterfactual import SurrogateEval, surrogate_eval
from .dac import DacSet, DisturbanceBuffer, control
from .errors import ConfigError, DimensionError, ProtocolError
from .lds import LdsSystem
from .stability import StabilityCertificate


@dataclass
class AgentConfig:
    index: int
    K: np.ndarray
    certificate: StabilityCertificate
    H: int
    eta: float
    setting: int
    dac_set: DacSet
    M_init: np.ndarray | None = None
    # sum of B_j K_j over the other agents; required in setting 2
    others_feedback: np.ndarray | None = None
    U: float | None = None

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise ConfigError(f"agent {self.index}: information setting must be 1 or 2")
        if self.H < 1:
            raise ConfigError(f"agent {self.index}: H must be at least 1")
        if self.eta < 0 or not math.isfinite(self.eta):
            raise ConfigError(f"agent {self.index}: step size must be finite and non-negative")
        if self.dac_set.H != self.H:
            raise ConfigError(f"agent {self.index}: DAC set memory {self.dac_set.H} differs from H={self.H}")
        if self.M_init is None:
            self.M_init = np.zeros(self.dac_set.shape)
        self.M_init = np.asarray(self.M_init, float)
        if not self.dac_set.contains(self.M_init):
            raise ConfigError(f"agent {self.index}: initial parameters lie outside the feasible set")
        if self.setting == 2 and self.others_feedback is None:
            raise ConfigError(f"agent {self.index}: setting 2 needs the other agents' feedback sum")


class GpcAgent:
    """Online gradient descent over disturbance-action parameters.

    Round protocol: `act(x_t)` then, after the plant steps, `observe(x_{t+1}, aggregate)`.
    `observe` differentiates the memory loss at the current parameters using the
    signal history up to t-1, takes a projected step, then records the newly
    recovered signal for round t.
    """

    def __init__(self, config: AgentConfig, sys: LdsSystem, cost):
        i = config.index
        if not 0 <= i < sys.N:
            raise DimensionError(f"agent index {i} out of range")
        self.cfg = config
        self.index = i
        self.setting = config.setting
        self.cost = cost
        self.A = sys.A
        self.B = sys.B[i]
        self.K = np.asarray(config.K, float).reshape(self.B.shape[1], sys.d)
        self.H = config.H
        self.eta = float(config.eta)
        self.dac_set = config.dac_set
        if self.dac_set.shape != (self.H, self.B.shape[1], sys.d):
            raise DimensionError("DAC set shape does not match the plant", agent=i)
        self.S = None
        closed = self.A - self.B @ self.K
        if self.setting == 2:
            self.S = np.asarray(config.others_feedback, float).reshape(sys.d, sys.d)
            closed = closed - self.S
        self.closed_loop = closed
        self.M = config.M_init.copy()
        cap = 2 * self.H + 64
        self.signal = DisturbanceBuffer(sys.d, cap)
        self.drive = DisturbanceBuffer(sys.d, cap)
        self.t = 0
        self.last_estimate = np.zeros(sys.d)
        self.last_eval: SurrogateEval | None = None
        self.max_control = 0.0
        self._x = None
        self._u = None

    @property
    def params(self):
        return self.M

    def act(self, x):
        x = np.asarray(x, float).reshape(-1)
        u = control(self.K, self.M, self.signal, x)
        self._x, self._u = x, u
        self.max_control = max(self.max_control, float(np.linalg.norm(u)))
        return u

    def surrogate(self, with_grad=True) -> SurrogateEval:
        omega = self.signal.window(2 * self.H + 1)
        drive = self.drive.window(self.H + 1)
        return surrogate_eval(self.closed_loop, self.B, self.K, self.M, omega, drive, self.cost, self.t, with_grad)

    def apply(self, grad):
        self.M = self.dac_set.project(self.M - self.eta * np.asarray(grad, float))

    def record(self, x_next, aggregate_other=None):
        if self._x is None:
            raise ProtocolError(f"agent {self.index}: observe called before act")
        x_next = np.asarray(x_next, float).reshape(-1)
        proxy = x_next - self.A @ self._x - self.B @ self._u
        if self.setting == 1:
            sig, drv = proxy, proxy
        else:
            agg = np.asarray(aggregate_other, float).reshape(-1)
            sig = proxy - agg
            drv = sig + agg + self.S @ self._x
        self.signal.push(sig)
        self.drive.push(drv)
        self.last_estimate = sig
        self._x = self._u = None
        self.t += 1

    def observe(self, x_next, aggregate_other=None):
        if self.setting == 2 and aggregate_other is None:
            raise ProtocolError(f"agent {self.index}: setting 2 requires the aggregate of the other agents' inputs")
        if self.eta > 0:
            ev = self.surrogate()
            self.last_eval = ev
            self.apply(ev.grad)
        self.record(x_next, aggregate_other)

    def audit_control_bound(self):
        if self.cfg.U is not None and self.max_control > self.cfg.U:
            warnings.warn(f"agent {self.index}: realized control norm {self.max_control:.4g} exceeds U={self.cfg.U}")
        return self.max_control


# ---------------------------------------------------------------------------
# memory and step-size rules (natural logarithms, explicit multiplier c_eta)


class Tuning(NamedTuple):
    H: int
    eta: float
    W_tilde: float | None = None


def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ConfigError(f"{k} must be positive, got {v}")


def tune_setting1(G, W, N, U, maxB, kappa, gamma, T, c_eta=1.0) -> Tuning:
    """Independent learners. N may be the agent's own guess of the population size."""
    _positive(G=G, W=W, N=N, kappa=kappa, gamma=gamma, T=T, c_eta=c_eta)
    W_tilde = W + (N - 1) * U * maxB
    eta = c_eta / (G * W_tilde * math.sqrt(T))
    H = max(1, math.ceil(math.log(kappa * T) / gamma))
    return Tuning(H, eta, W_tilde)


def tune_setting2(N, kappa, gamma, T, c_eta=1.0) -> Tuning:
    _positive(N=N, kappa=kappa, gamma=gamma, T=T, c_eta=c_eta)
    eta = c_eta / (N * math.sqrt(T))
    H = max(1, math.ceil(math.log(2 * kappa * N * N * math.sqrt(T)) / gamma))
    return Tuning(H, eta)


def tune_setting2_lipschitz(N, kappa, gamma, T, c_eta=1.0) -> Tuning:
    _positive(N=N, kappa=kappa, gamma=gamma, T=T, c_eta=c_eta)
    eta = c_eta / math.sqrt(T)
    H = max(1, math.ceil(math.log(2 * kappa * N * math.sqrt(T)) / gamma))
    return Tuning(H, eta)


# ---------------------------------------------------------------------------
# online gradient descent with memory


class BallSet:
    def __init__(self, dim, radius):
        self.dim, self.radius = int(dim), float(radius)

    def project(self, x):
        x = np.asarray(x, float)
        n = np.linalg.norm(x)
        return x if n <= self.radius else x * (self.radius / n)

    def diameter(self):
        return 2 * self.radius


class QuadraticMemoryLoss:
    """|sum_j A_j x_{t-H+j} - b|^2 over a window of H+1 points, oldest first."""

    def __init__(self, mats, b):
        self.mats = np.asarray(mats, float)
        self.b = np.asarray(b, float)
        self.S = self.mats.sum(axis=0)

    def value(self, window):
        r = np.einsum("jab,jb->a", self.mats, np.asarray(window, float)) - self.b
        return float(r @ r)

    def diag_value(self, x):
        r = self.S @ x - self.b
        return float(r @ r)

    def grad_diag(self, x):
        return 2 * self.S.T @ (self.S @ x - self.b)

    def gradient_bound(self, radius):
        s = np.linalg.norm(self.S, 2)
        return 2 * s * (s * radius + np.linalg.norm(self.b))

    def lipschitz(self, radius):
        norms = np.linalg.norm(self.mats, ord=2, axis=(1, 2))
        return 2 * norms.max() * (norms.sum() * radius + np.linalg.norm(self.b))


@dataclass
class MemoryOgdResult:
    iterates: np.ndarray
    realized: float
    comparator: float
    comparator_point: np.ndarray
    regret: float


def minimize_diag(losses, feasible, x0, iters=10_000, tol=1e-10):
    """Offline projected gradient descent with backtracking on sum_t f_t(x)."""

    if all(isinstance(l, QuadraticMemoryLoss) for l in losses):
        # a sum of squared residuals is one quadratic; fold it once
        P = sum(l.S.T @ l.S for l in losses)
        q = sum(l.S.T @ l.b for l in losses)
        c = float(sum(l.b @ l.b for l in losses))

        def F(x):
            return float(x @ P @ x - 2 * q @ x + c)

        def dF(x):
            return 2 * (P @ x - q)
    else:
        def F(x):
            return sum(l.diag_value(x) for l in losses)

        def dF(x):
            return sum(l.grad_diag(x) for l in losses)

    x = feasible.project(np.asarray(x0, float))
    fx, step = F(x), 1.0
    for _ in range(iters):
        g = dF(x)
        while True:
            y = feasible.project(x - step * g)
            fy = F(y)
            if fy <= fx + g @ (y - x) + np.sum((y - x) ** 2) / (2 * step) + 1e-15 * abs(fx):
                break
            step *= 0.5
            if step < 1e-20:
                return x, fx
        moved = np.linalg.norm(y - x) / step
        x, fx = y, fy
        step *= 1.5
        if moved <= tol:
            break
    return x, fx


def ogd_with_memory(losses, feasible, eta, H, x_init=None, comparator_iters=10_000) -> MemoryOgdResult:
    """Play x_t, suffer l_t(x_{t-H..t}) for t >= H, step on the diagonal gradient.

    `losses[t]` is the loss revealed at round t; rounds t < H only hold the initial point.
    """
    T = len(losses)
    if H < 0 or T <= H:
        raise ConfigError("need more rounds than the memory length")
    dim = feasible.dim
    x = feasible.project(np.zeros(dim) if x_init is None else np.asarray(x_init, float))
    xs = np.zeros((T + 1, dim))
    xs[: H + 1] = x
    realized = 0.0
    for t in range(H, T):
        realized += losses[t].value(xs[t - H: t + 1])
        xs[t + 1] = feasible.project(xs[t] - eta * losses[t].grad_diag(xs[t]))
    active = losses[H:]
    xstar, fstar = minimize_diag(active, feasible, xs[T], iters=comparator_iters)
    x0_star, f0 = minimize_diag(active, feasible, np.zeros(dim), iters=comparator_iters)
    if f0 < fstar:
        xstar, fstar = x0_star, f0
    return MemoryOgdResult(iterates=xs, realized=realized, comparator=fstar, comparator_point=xstar,
                           regret=realized - fstar)
