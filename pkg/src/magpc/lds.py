"""Shared linear plant, bounded disturbance generators, traces and the round loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError, ProtocolError

PRNG_NAME = "numpy-PCG64/SeedSequence-blocked-v1"
PRNG_BLOCK = 4096
DIVERGENCE_GUARD = 1e9

DISTURBANCE_KINDS = (
    "constant-vector",
    "clipped-gaussian",
    "sinusoidal",
    "sign-switching",
    "bernoulli-scalar",
    "explicit-sequence",
)


def _as_matrix(a, name):
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class LdsSystem:
    A: np.ndarray
    B: tuple
    W: float = 1.0

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        Bs = []
        for i, b in enumerate(self.B):
            b = np.asarray(b, dtype=float)
            if b.ndim == 1:
                b = b.reshape(A.shape[0], -1)
            if b.ndim != 2 or b.shape[0] != A.shape[0]:
                raise DimensionError(f"B has shape {b.shape}, expected {A.shape[0]} rows", agent=i)
            if b.shape[1] < 1:
                raise DimensionError("control dimension must be at least 1", agent=i)
            Bs.append(b)
        if not Bs:
            raise ConfigError("at least one agent is required")
        if not (self.W > 0):
            raise ConfigError(f"disturbance bound W must be positive, got {self.W}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", tuple(Bs))
        object.__setattr__(self, "W", float(self.W))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return len(self.B)

    @property
    def k(self) -> list:
        return [b.shape[1] for b in self.B]

    @property
    def B_cat(self) -> np.ndarray:
        return np.hstack(self.B)

    def b_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(b, 2) for b in self.B])

    def check_controls(self, controls):
        if len(controls) != self.N:
            raise DimensionError(f"expected {self.N} controls, got {len(controls)}")
        out = []
        for i, (b, u) in enumerate(zip(self.B, controls)):
            u = np.asarray(u, dtype=float).reshape(-1)
            if u.shape[0] != b.shape[1]:
                raise DimensionError(f"control has length {u.shape[0]}, expected {b.shape[1]}", agent=i)
            out.append(u)
        return out


def step(sys: LdsSystem, x, controls, w, check_bound=True) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if x.shape[0] != sys.d or w.shape[0] != sys.d:
        raise DimensionError(f"state/disturbance must have length {sys.d}")
    if check_bound and np.linalg.norm(w) > sys.W * (1 + 1e-12):
        raise ConfigError(f"disturbance norm {np.linalg.norm(w)} exceeds W={sys.W}")
    out = sys.A @ x + w
    for b, u in zip(sys.B, sys.check_controls(controls)):
        out = out + b @ u
    return out


def recover_disturbance(sys: LdsSystem, i, setting, x_prev, x_next, own_u, aggregate_other=None):
    """Setting 1 returns the proxy that lumps in the other agents; setting 2 the true w."""
    w_tilde = np.asarray(x_next, float) - sys.A @ np.asarray(x_prev, float) - sys.B[i] @ np.asarray(own_u, float).reshape(-1)
    if setting == 1:
        return w_tilde
    if setting != 2:
        raise ConfigError(f"unknown information setting {setting}")
    if aggregate_other is None:
        raise ProtocolError(f"agent {i}: setting 2 requires the aggregate of the other agents' inputs")
    return w_tilde - np.asarray(aggregate_other, float)


# ---------------------------------------------------------------------------
# seeded random streams, random access by round index


@lru_cache(maxsize=64)
def _block(seed: int, block: int, width: int, dist: str) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(block),))))
    if dist == "normal":
        out = rng.standard_normal((PRNG_BLOCK, width))
    else:
        out = rng.random((PRNG_BLOCK, width))
    out.setflags(write=False)
    return out


def stream_values(seed: int, ts, width: int, dist: str = "uniform") -> np.ndarray:
    """Rows of a seeded stream at rounds `ts`. Deterministic in (seed, t)."""
    ts = np.asarray(ts, dtype=np.int64).reshape(-1)
    if ts.size and ts.min() < 0:
        raise ConfigError("round index must be non-negative")
    out = np.empty((ts.size, width))
    blocks = ts // PRNG_BLOCK
    for b in np.unique(blocks):
        sel = blocks == b
        out[sel] = _block(seed, int(b), width, dist)[ts[sel] % PRNG_BLOCK]
    return out


def _vec(v, d, name):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = np.full(d, float(a))
    a = a.reshape(-1)
    if a.shape[0] != d:
        raise ConfigError(f"{name} must have length {d}, got {a.shape[0]}")
    return a


class DisturbanceGenerator:
    """Oblivious bounded sequence, fixed by (kind, parameters, seed)."""

    def __init__(self, kind: str, d: int, W: float, seed: int = 0, **params):
        if kind not in DISTURBANCE_KINDS:
            raise ConfigError(f"unknown disturbance kind {kind!r}; choose from {DISTURBANCE_KINDS}")
        if not (W > 0):
            raise ConfigError("W must be positive")
        self.kind, self.d, self.W, self.seed = kind, int(d), float(W), int(seed)
        self.params = dict(params)
        tol = self.W * (1 + 1e-12)
        p = self.params
        if kind == "constant-vector":
            self._value = _vec(p.get("value", np.zeros(d)), d, "value")
            if np.linalg.norm(self._value) > tol:
                raise ConfigError("constant disturbance exceeds W")
        elif kind == "clipped-gaussian":
            self._sigma = float(p.get("sigma", 1.0))
            self._clip = float(p.get("clip", self.W))
            if self._clip > tol:
                raise ConfigError(f"clip level {self._clip} exceeds W={self.W}")
        elif kind == "sinusoidal":
            self._amp = _vec(p.get("amplitude", self.W / np.sqrt(d)), d, "amplitude")
            self._freq = _vec(p.get("frequency", 0.1), d, "frequency")
            phase = _vec(p.get("phase", 0.0), d, "phase")
            if p.get("random_phase", False):
                phase = phase + 2 * np.pi * stream_values(self.seed, [0], d)[0]
            self._phase = phase
            if np.linalg.norm(self._amp) > tol:
                raise ConfigError("sinusoid amplitude exceeds W")
        elif kind == "sign-switching":
            self._value = _vec(p.get("value", np.eye(d)[0] * self.W), d, "value")
            self._period = int(p.get("period", 1))
            self._prob = p.get("probability")
            if self._period < 1:
                raise ConfigError("period must be at least 1")
            if np.linalg.norm(self._value) > tol:
                raise ConfigError("sign-switching magnitude exceeds W")
        elif kind == "bernoulli-scalar":
            self._prob = float(p.get("probability", 0.5))
            self._amp = float(p.get("amplitude", 1.0))
            if not 0 <= self._prob <= 1:
                raise ConfigError("probability must lie in [0, 1]")
            if abs(self._amp) > tol:
                raise ConfigError("bernoulli amplitude exceeds W")
        else:
            seq = np.asarray(p.get("values"), dtype=float)
            if seq.ndim == 1:
                seq = seq.reshape(-1, 1) if d == 1 else seq.reshape(1, -1)
            if seq.ndim != 2 or seq.shape[1] != d:
                raise ConfigError(f"explicit sequence must have shape (T, {d})")
            if np.any(np.linalg.norm(seq, axis=1) > tol):
                raise ConfigError("explicit sequence exceeds W")
            self._seq = seq

    @property
    def time_invariant(self) -> bool:
        return self.kind == "constant-vector"

    def describe(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed, "prng": PRNG_NAME}
        for k, v in self.params.items():
            out[k] = np.asarray(v).tolist() if isinstance(v, (list, tuple, np.ndarray)) else v
        return out

    def values(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.int64).reshape(-1)
        n, d = ts.size, self.d
        if n and ts.min() < 0:
            raise ConfigError("round index must be non-negative")
        kind = self.kind
        if kind == "constant-vector":
            return np.tile(self._value, (n, 1))
        if kind == "clipped-gaussian":
            z = self._sigma * stream_values(self.seed, ts, d, "normal")
            nrm = np.linalg.norm(z, axis=1)
            scale = np.where(nrm > self._clip, self._clip / np.maximum(nrm, 1e-300), 1.0)
            return z * scale[:, None]
        if kind == "sinusoidal":
            return self._amp * np.sin(np.outer(ts, self._freq) + self._phase)
        if kind == "sign-switching":
            periods = ts // self._period
            if self._prob is None:
                sign = np.where(periods % 2 == 0, 1.0, -1.0)
            else:
                sign = np.where(stream_values(self.seed, periods, 1)[:, 0] < float(self._prob), 1.0, -1.0)
            return sign[:, None] * self._value
        if kind == "bernoulli-scalar":
            out = np.zeros((n, d))
            out[:, 0] = self._amp * (stream_values(self.seed, ts, 1)[:, 0] < self._prob)
            return out
        if ts.size and ts.max() >= self._seq.shape[0]:
            raise ConfigError(f"explicit sequence has only {self._seq.shape[0]} rounds")
        return self._seq[ts]

    def generate(self, t: int) -> np.ndarray:
        return self.values([t])[0]

    def sequence(self, T: int) -> np.ndarray:
        return self.values(np.arange(T))

    def sup_norm(self) -> float:
        """A bound on every emitted norm (tighter than W when cheap to compute)."""
        if self.kind == "constant-vector":
            return float(np.linalg.norm(self._value))
        if self.kind == "sinusoidal":
            return float(np.linalg.norm(self._amp))
        if self.kind == "sign-switching":
            return float(np.linalg.norm(self._value))
        if self.kind == "bernoulli-scalar":
            return abs(self._amp)
        if self.kind == "explicit-sequence":
            return float(np.linalg.norm(self._seq, axis=1).max(initial=0.0))
        return self._clip


# ---------------------------------------------------------------------------


@dataclass
class Trace:
    x: np.ndarray
    u: list
    w: np.ndarray
    w_est: np.ndarray
    cost: np.ndarray
    settings: list
    M_hist: list | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.w.shape[0]

    @property
    def N(self) -> int:
        return len(self.u)

    def others_input(self, sys: LdsSystem, i: int) -> np.ndarray:
        """Per-round sum of B_j u^j over j != i."""
        out = np.zeros_like(self.w)
        for j, (b, u) in enumerate(zip(sys.B, self.u)):
            if j != i:
                out += u @ b.T
        return out

    def replay_error(self, sys: LdsSystem) -> float:
        x = self.x[0].copy()
        err = 0.0
        for t in range(self.T):
            x = step(sys, x, [u[t] for u in self.u], self.w[t], check_bound=False)
            err = max(err, float(np.max(np.abs(x - self.x[t + 1]))))
            x = self.x[t + 1]
        return err

    def to_csv(self, path):
        d = self.x.shape[1]
        kmax = max(u.shape[1] for u in self.u)
        header = ["t"] + [f"x{j}" for j in range(d)] + ["agent"] + [f"u{j}" for j in range(kmax)]
        header += [f"w{j}" for j in range(d)] + [f"w_est{j}" for j in range(d)] + ["cost"]
        fmt = "{:.17g}".format
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for t in range(self.T):
                xs = [fmt(v) for v in self.x[t]]
                ws = [fmt(v) for v in self.w[t]]
                for i, u in enumerate(self.u):
                    us = [fmt(v) for v in u[t]] + [""] * (kmax - u.shape[1])
                    es = [fmt(v) for v in self.w_est[i, t]]
                    wr.writerow([t] + xs + [i] + us + ws + es + [fmt(self.cost[i, t])])


def simulate(sys: LdsSystem, agents: Sequence, gen: DisturbanceGenerator, costs: Sequence, T: int,
             x0=None, guard: float = DIVERGENCE_GUARD, record_params: bool = True) -> Trace:
    """Run the shared round loop: all agents act, the plant steps, all agents observe.

    Agents expose `setting`, `act(x)`, `observe(x_next, aggregate_other)` and
    `last_estimate`; setting-1 agents are never handed the aggregate.
    """
    if T < 1:
        raise ConfigError("T must be at least 1")
    if len(agents) != sys.N or len(costs) != sys.N:
        raise DimensionError(f"need {sys.N} agents and cost oracles")
    d, N = sys.d, sys.N
    x = np.zeros(d) if x0 is None else np.asarray(x0, float).reshape(-1).copy()
    if x.shape[0] != d:
        raise DimensionError(f"x0 must have length {d}")
    ws = gen.sequence(T)
    if np.any(np.linalg.norm(ws, axis=1) > sys.W * (1 + 1e-12)):
        raise ConfigError("generator emits disturbances above W")
    xs = np.zeros((T + 1, d))
    xs[0] = x
    us = [np.zeros((T, k)) for k in sys.k]
    west = np.zeros((N, T, d))
    cost = np.zeros((N, T))
    track = record_params and all(getattr(a, "params", None) is not None for a in agents)
    hist = [np.zeros((T + 1,) + a.params.shape) for a in agents] if track else None
    for t in range(T):
        if track:
            for i, a in enumerate(agents):
                hist[i][t] = a.params
        controls = [np.asarray(a.act(x), float).reshape(-1) for a in agents]
        controls = sys.check_controls(controls)
        for i in range(N):
            us[i][t] = controls[i]
            cost[i, t] = costs[i].value(t, x, controls[i])
        pushes = [b @ u for b, u in zip(sys.B, controls)]
        total = np.sum(pushes, axis=0)
        x_next = sys.A @ x + total + ws[t]
        if not np.all(np.isfinite(x_next)) or np.linalg.norm(x_next) > guard:
            raise DivergenceError(f"state norm exceeded {guard:g} at round {t + 1}", round_index=t + 1)
        for i, a in enumerate(agents):
            agg = total - pushes[i] if a.setting == 2 else None
            a.observe(x_next, agg)
            west[i, t] = a.last_estimate
        x = x_next
        xs[t + 1] = x
    if track:
        for i, a in enumerate(agents):
            hist[i][T] = a.params
    return Trace(x=xs, u=us, w=ws, w_est=west, cost=cost,
                 settings=[a.setting for a in agents], M_hist=hist)
