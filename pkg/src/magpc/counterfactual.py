"""Transfer matrices, ideal states/actions, the memory loss and its analytic gradient.

Window conventions used throughout:

* `omega` has shape (2H+1, d) and holds the policy input signal for rounds
  t-1-2H .. t-1, oldest first (zeros before round 0).
* `drive` has shape (H+1, d) and holds the exogenous term entering the ideal
  rollout at rounds t-1-H .. t-1.
* DAC parameters are (H, k, d) arrays; block p-1 multiplies the signal from p
  rounds earlier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


def matrix_powers(C, n) -> np.ndarray:
    C = np.asarray(C, float)
    out = np.empty((n + 1,) + C.shape)
    out[0] = np.eye(C.shape[0])
    for j in range(1, n + 1):
        out[j] = out[j - 1] @ C
    return out


class TransferStack:
    """Disturbance-to-state maps for a window of per-agent DAC parameters.

    `windows[i][k]` is agent i's parameter array at round t-k, k = 0..h. Pass the
    global closed loop with all agents' B for the aggregated form, or the
    single-agent closed loop with a one-element B list for the proxy form.
    """

    def __init__(self, closed_loop, B_list, windows):
        self.C = np.asarray(closed_loop, float)
        self.B = [np.asarray(b, float).reshape(self.C.shape[0], -1) for b in B_list]
        self.windows = [np.asarray(w, float) for w in windows]
        if len(self.windows) != len(self.B):
            raise DimensionError("need one parameter window per input matrix")
        shapes = {w.shape[:2] for w in self.windows}
        if len(shapes) != 1:
            raise DimensionError("all windows must share (h+1, H)")
        hp1, self.H = shapes.pop()
        self.h = hp1 - 1
        for i, (b, w) in enumerate(zip(self.B, self.windows)):
            if w.shape[2:] != (b.shape[1], self.C.shape[0]):
                raise DimensionError(f"window blocks have shape {w.shape[2:]}", agent=i)
        self.powers = matrix_powers(self.C, max(2 * self.H + 1, self.H + self.h + 1))

    def psi(self, l: int) -> np.ndarray:
        H, h = self.H, self.h
        if not 0 <= l <= H + h:
            raise ValueError(f"lag {l} outside [0, {H + h}]")
        out = self.powers[l].copy() if l <= h else np.zeros_like(self.C)
        for k in range(h + 1):
            p = l - k
            if 1 <= p <= H:
                s = sum(b @ w[k, p - 1] for b, w in zip(self.B, self.windows))
                out += self.powers[k] @ s
        return out


def psi(stack: TransferStack, l: int, h: int | None = None) -> np.ndarray:
    if h is not None and h != stack.h:
        raise ValueError(f"stack was built for h={stack.h}")
    return stack.psi(l)


def unroll_state(stack: TransferStack, x_start, w_lags) -> np.ndarray:
    """State at t+1 from the state at t-h; `w_lags[l]` is the disturbance at t-l, l = 0..H+h."""
    w_lags = np.asarray(w_lags, float)
    n = stack.H + stack.h + 1
    if w_lags.shape[0] != n:
        raise DimensionError(f"need {n} disturbance lags, got {w_lags.shape[0]}")
    out = stack.powers[stack.h + 1] @ np.asarray(x_start, float)
    for l in range(n):
        out = out + stack.psi(l) @ w_lags[l]
    return out


# ---------------------------------------------------------------------------
# ideal state: two independent paths


def ideal_state_transfer(closed_loop, B_list, windows, w_window) -> np.ndarray:
    """Sum over l of the transfer matrix at lag l times w_{t-1-l}.

    `windows[i]` has shape (H+1, H, k_i, d) ordered oldest first (rounds t-1-H .. t-1);
    `w_window` is (2H+1, d) oldest first.
    """
    stack = TransferStack(closed_loop, B_list, [np.asarray(w)[::-1] for w in windows])
    w_window = np.asarray(w_window, float)
    H = stack.H
    y = np.zeros(stack.C.shape[0])
    for l in range(2 * H + 1):
        y = y + stack.psi(l) @ w_window[2 * H - l]
    return y


def ideal_state_rollout(closed_loop, B_list, windows, w_window) -> np.ndarray:
    """Zero-initialised (H+1)-step rollout; same conventions as `ideal_state_transfer`."""
    C = np.asarray(closed_loop, float)
    w_window = np.asarray(w_window, float)
    H = np.asarray(windows[0]).shape[1]
    z = np.zeros(C.shape[0])
    for q in range(H + 1):
        lags = w_window[q:H + q][::-1]
        push = sum(np.asarray(b).reshape(C.shape[0], -1) @ np.einsum("pkd,pd->k", np.asarray(w)[q], lags)
                   for b, w in zip(B_list, windows))
        z = C @ z + push + w_window[H + q]
    return z


def ideal_state(closed_loop, B_list, windows, w_window, path="rollout") -> np.ndarray:
    if path == "transfer":
        return ideal_state_transfer(closed_loop, B_list, windows, w_window)
    return ideal_state_rollout(closed_loop, B_list, windows, w_window)


def stationary_windows(params_list, H=None):
    """Repeat each agent's current parameters over the H+1 rollout steps."""
    out = []
    for M in params_list:
        M = np.asarray(M, float)
        out.append(np.broadcast_to(M, (M.shape[0] + 1,) + M.shape))
    return out


def others_drive(i, B_list, windows, w_window) -> np.ndarray:
    """w_s plus the other agents' feedforward pushes for the H+1 rollout steps."""
    w_window = np.asarray(w_window, float)
    H = np.asarray(windows[0]).shape[1]
    drive = w_window[H:].copy()
    for j, (b, w) in enumerate(zip(B_list, windows)):
        if j == i:
            continue
        w = np.asarray(w)
        for q in range(H + 1):
            drive[q] += b @ np.einsum("pkd,pd->k", w[q], w_window[q:H + q][::-1])
    return drive


# ---------------------------------------------------------------------------
# single-agent view used by the learner (stationary own parameters)


def hankel(omega, H):
    """(H+1, H, d) lag stacks for each rollout step, plus the (H, d) stack for the action."""
    omega = np.asarray(omega, float)
    idx = np.arange(H + 1)[:, None] + np.arange(H - 1, -1, -1)[None, :]
    return omega[idx], omega[H + 1:][::-1]


def ideal_forward(C, B, K, M, omega, drive):
    """(y, v) for stationary own parameters M."""
    M = np.asarray(M, float)
    H = M.shape[0]
    Wq, Wv = hankel(omega, H)
    dac = np.einsum("pkd,qpd->qk", M, Wq)
    z = np.zeros(C.shape[0])
    for q in range(H + 1):
        z = C @ z + B @ dac[q] + drive[q]
    v = -K @ z + np.einsum("pkd,pd->k", M, Wv)
    return z, v


def ideal_backward(C, B, K, omega, g_y, g_u, H):
    """Gradient of c(y, v) in M given the cost gradients at (y, v)."""
    Wq, Wv = hankel(omega, H)
    r = g_y - K.T @ g_u
    lam = np.empty((H + 1, B.shape[1]))
    lam[H] = B.T @ r
    for q in range(H - 1, -1, -1):
        r = C.T @ r
        lam[q] = B.T @ r
    return np.einsum("qk,qpd->pkd", lam, Wq) + g_u[None, :, None] * Wv[:, None, :]


def surrogate_affine(C, B, K, omega, drive, H):
    """y = y0 + Jy m and v = v0 + Jv m, with m the C-order flattening of M."""
    C, B, K = np.asarray(C, float), np.asarray(B, float), np.asarray(K, float)
    d, k = B.shape
    Wq, Wv = hankel(omega, H)
    z = np.zeros(d)
    for q in range(H + 1):
        z = C @ z + drive[q]
    P = matrix_powers(C, H)[::-1]
    G = P @ B
    Jy = np.einsum("qda,qpb->dpab", G, Wq).reshape(d, -1)
    E = np.einsum("ca,pb->cpab", np.eye(k), Wv).reshape(k, -1)
    return z, Jy, -K @ z, -K @ Jy + E


@dataclass
class SurrogateEval:
    y: np.ndarray
    v: np.ndarray
    loss: float
    grad: np.ndarray | None = None


def surrogate_eval(C, B, K, M, omega, drive, oracle, t, with_grad=True) -> SurrogateEval:
    y, v = ideal_forward(C, B, K, M, omega, drive)
    val, gy, gu = oracle.eval(t, y, v)
    g = ideal_backward(C, B, K, omega, gy, gu, np.asarray(M).shape[0]) if with_grad else None
    return SurrogateEval(y=y, v=v, loss=val, grad=g)


def surrogate_loss(i, M_i, closed_loop, B_list, K_list, others_windows, w_window, oracle, t,
                   with_grad=True) -> SurrogateEval:
    """Memory loss of agent i at round t with its own parameters held at M_i.

    `others_windows[j]` is ignored for j == i and otherwise has shape (H+1, H, k_j, d).
    """
    B = np.asarray(B_list[i], float)
    K = np.asarray(K_list[i], float).reshape(B.shape[1], -1)
    drive = others_drive(i, B_list, others_windows, w_window)
    return surrogate_eval(np.asarray(closed_loop, float), B, K, M_i, w_window, drive, oracle, t, with_grad)


def grad_surrogate(i, M_i, closed_loop, B_list, K_list, others_windows, w_window, oracle, t) -> np.ndarray:
    return surrogate_loss(i, M_i, closed_loop, B_list, K_list, others_windows, w_window, oracle, t).grad


def windowed_loss(i, closed_loop, B_list, K_list, windows, current, w_window, oracle, t) -> SurrogateEval:
    """Loss with every agent's parameters following their recorded window; `current` is agent i's M at t."""
    C = np.asarray(closed_loop, float)
    H = np.asarray(windows[0]).shape[1]
    y = ideal_state_rollout(C, B_list, windows, w_window)
    K = np.asarray(K_list[i], float).reshape(np.asarray(B_list[i]).shape[1], -1)
    v = -K @ y + np.einsum("pkd,pd->k", np.asarray(current, float), np.asarray(w_window)[H + 1:][::-1])
    return SurrogateEval(y=y, v=v, loss=oracle.value(t, y, v))


def finite_difference_grad(fun, M, eps=1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array (test oracle)."""
    M = np.asarray(M, float)
    g = np.zeros_like(M)
    flat, gf = M.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        e = np.zeros_like(flat)
        e[j] = eps
        gf[j] = (fun((flat + e).reshape(M.shape)) - fun((flat - e).reshape(M.shape))) / (2 * eps)
    return g
