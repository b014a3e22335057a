"""(kappa, gamma) strong-stability certificates and Riccati-based controller synthesis."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DefectiveMatrixError, DimensionError, NotStabilizingError, SynthesisError

GAMMA_CLAMP = 1e-6
COND_LIMIT = 1e8


@dataclass(frozen=True)
class StabilityCertificate:
    kappa: float
    gamma: float
    Q: np.ndarray
    Lmat: np.ndarray
    residual: float
    K_norm: float = 0.0

    @property
    def closed_loop(self) -> np.ndarray:
        return np.real_if_close(self.Q @ self.Lmat @ np.linalg.inv(self.Q))

    def loosened(self, kappa=None, gamma=None) -> "StabilityCertificate":
        """A weaker but still valid certificate: kappa can only grow, gamma only shrink."""
        k = self.kappa if kappa is None else float(kappa)
        g = self.gamma if gamma is None else float(gamma)
        if k < self.kappa - 1e-12:
            raise ValueError(f"kappa override {k} is below the certified {self.kappa}")
        if g > self.gamma + 1e-12 or not 0 < g < 1:
            raise ValueError(f"gamma override {g} must lie in (0, {self.gamma}]")
        return replace(self, kappa=k, gamma=g)

    def validate(self, K=None) -> bool:
        qn = np.linalg.norm(self.Q, 2) * np.linalg.norm(np.linalg.inv(self.Q), 2)
        kn = self.K_norm if K is None else np.linalg.norm(np.atleast_2d(K), 2)
        return (kn <= self.kappa + 1e-9 and qn <= self.kappa * (1 + 1e-9)
                and np.linalg.norm(self.Lmat, 2) <= 1 - self.gamma + 1e-9 and self.residual <= 1e-8)

    def as_dict(self) -> dict:
        return {"kappa": self.kappa, "gamma": self.gamma, "residual": self.residual,
                "K_norm": self.K_norm, "spectral_radius": float(np.abs(np.diag(self.Lmat)).max(initial=0.0))}


def _certify_closed_loop(Acl, K_norm):
    lam, Q = np.linalg.eig(Acl)
    rho = float(np.abs(lam).max())
    if rho >= 1.0:
        raise NotStabilizingError(f"closed loop has spectral radius {rho:.6g} >= 1", spectral_radius=rho)
    cond = float(np.linalg.cond(Q))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise DefectiveMatrixError(
            f"closed-loop eigenbasis is numerically defective (cond {cond:.3g} > {COND_LIMIT:g}); "
            "perturb A by a small epsilon to obtain a diagonalizable closed loop",
            condition_number=cond)
    L = np.diag(lam)
    resid = float(np.linalg.norm(Acl - Q @ L @ np.linalg.inv(Q), 2))
    gamma = min(1.0 - rho, 1.0 - GAMMA_CLAMP)
    kappa = max(K_norm, cond, 1.0)
    if np.isrealobj(Acl) and np.all(np.abs(lam.imag) == 0):
        Q, L = Q.real, L.real
    return StabilityCertificate(kappa=float(kappa), gamma=float(gamma), Q=Q, Lmat=L, residual=resid,
                                K_norm=float(K_norm))


def certify(A, B, K) -> StabilityCertificate:
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    K = np.asarray(K, float).reshape(B.shape[1], A.shape[0])
    return _certify_closed_loop(A - B @ K, float(np.linalg.norm(K, 2)))


def certify_global(A, B_list, K_list) -> StabilityCertificate:
    if len(B_list) != len(K_list):
        raise DimensionError("need one gain per agent")
    A = np.atleast_2d(np.asarray(A, float))
    Bs = [np.asarray(b, float).reshape(A.shape[0], -1) for b in B_list]
    Ks = []
    for i, (b, k) in enumerate(zip(Bs, K_list)):
        k = np.asarray(k, float)
        if k.size != b.shape[1] * A.shape[0]:
            raise DimensionError(f"gain has {k.size} entries, expected {b.shape[1]}x{A.shape[0]}", agent=i)
        Ks.append(k.reshape(b.shape[1], A.shape[0]))
    return certify(A, np.hstack(Bs), np.vstack(Ks))


def closed_loop(A, B_list, K_list) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, float))
    out = A.copy()
    for b, k in zip(B_list, K_list):
        b = np.asarray(b, float).reshape(A.shape[0], -1)
        out -= b @ np.asarray(k, float).reshape(b.shape[1], A.shape[0])
    return out


def synthesize(A, B, max_sweeps: int = 10_000, tol: float = 1e-12) -> np.ndarray:
    """Infinite-horizon LQR gain (identity weights) by Riccati value iteration."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    n, m = B.shape
    P = np.eye(n)
    for _ in range(max_sweeps):
        BtP = B.T @ P
        G = np.linalg.solve(np.eye(m) + BtP @ B, BtP @ A)
        P_new = np.eye(n) + A.T @ P @ A - A.T @ P @ B @ G
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            break
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P_new))):
            P = P_new
            BtP = B.T @ P
            return np.linalg.solve(np.eye(m) + BtP @ B, BtP @ A)
        P = P_new
    raise SynthesisError(f"Riccati iteration did not converge within {max_sweeps} sweeps")


def synthesize_joint(A, B_list):
    """One stabilizing gain for the stacked inputs, split back into per-agent rows."""
    A = np.atleast_2d(np.asarray(A, float))
    Bs = [np.asarray(b, float).reshape(A.shape[0], -1) for b in B_list]
    K = synthesize(A, np.hstack(Bs))
    out, r = [], 0
    for b in Bs:
        out.append(K[r:r + b.shape[1]])
        r += b.shape[1]
    return out
