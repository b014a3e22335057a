"""Closed-form constants and magnitude bounds consumed by tuning and by the invariant checks."""

from __future__ import annotations

import math

import numpy as np


def uniform_bound(kappa, gamma, W, H, sum_B) -> float:
    """The uniform state/action magnitude constant D."""
    return 6.0 * kappa**3 / gamma * W * (1.0 + kappa**2 * H * sum_B)


def memory_condition(kappa, gamma, H) -> bool:
    return H + 1 >= math.log(2.0 * kappa) / gamma


def transfer_bound(kappa, gamma, tau, H, sum_B, l) -> float:
    head = kappa * (1 - gamma) ** l if l <= H else 0.0
    return head + H * kappa * tau * sum_B * (1 - gamma) ** (l - 1)


def state_bounds(kappa, gamma, tau, W, H, sum_B) -> dict:
    """Per-quantity magnitude bounds valid for rounds t >= H+1."""
    core = W * (1 + tau * H * sum_B)
    den = 1 - kappa * (1 - gamma) ** (H + 1)
    decay = (1 - gamma) ** H
    out = {
        "y": kappa / gamma * core,
        "x_linear": kappa / gamma * W,
        "v": kappa**2 / gamma * core + tau / gamma * W,
    }
    if den > 0:
        out.update({
            "x": kappa / gamma * core / den,
            "u": kappa**2 / gamma * core / den + tau / gamma * W,
            "x_minus_y": decay * kappa**2 / gamma * core / den,
            "u_minus_v": decay * kappa**3 / gamma * core / den,
        })
    else:
        out.update({"x": math.inf, "u": math.inf, "x_minus_y": math.inf, "u_minus_v": math.inf})
    return out


def gradient_bound(G, D, H, d, W, kappa, gamma, max_B) -> float:
    return G * D * math.sqrt(H) * d * W * (1 + 2 * kappa**2 * max_B / gamma)


def coordinate_lipschitz(G, D, W, kappa, max_B) -> float:
    return 2 * G * D * W * kappa**2 * max_B


def surrogate_deviation_bound(G, D, gamma, H) -> float:
    return 2 * G * D * D * (1 - gamma) ** H


def memory_ogd_bound(D0, G0, L, H, eta, T) -> float:
    return D0**2 / eta + (G0**2 + L * H * H * G0) * eta * T


def sum_norms(B_list) -> float:
    return float(sum(np.linalg.norm(b, 2) for b in B_list))


def max_norm(B_list) -> float:
    return float(max(np.linalg.norm(b, 2) for b in B_list))
