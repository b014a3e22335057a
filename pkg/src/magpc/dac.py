"""Disturbance-action policy parameters, their feasible set and exact projection."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

MEMBERSHIP_TOL = 1e-9


class DacParams:
    """H blocks of shape (k, d), stored as one (H, k, d) array."""

    def __init__(self, blocks):
        arr = np.array(blocks, dtype=float)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise DimensionError(f"DAC parameters must have shape (H, k, d), got {arr.shape}")
        self.array = arr

    @classmethod
    def zeros(cls, H, k, d):
        return cls(np.zeros((H, k, d)))

    @property
    def H(self):
        return self.array.shape[0]

    @property
    def blocks(self):
        return list(self.array)

    def __array__(self, dtype=None, copy=None):
        return self.array if dtype is None else self.array.astype(dtype)

    def flat(self):
        return self.array.reshape(-1).copy()


class DacSet:
    """Product of per-block balls with radii tau (1 - gamma)^p, p = 1..H.

    `norm` picks the ball: "spectral" (default) or "frobenius".
    """

    def __init__(self, H, k, d, kappa, gamma, tau=None, norm="spectral", certificate=None):
        if H < 1:
            raise DimensionError("H must be at least 1")
        if not 0 < gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
        if norm not in ("spectral", "frobenius"):
            raise ValueError(f"unknown norm {norm!r}")
        self.H, self.k, self.d = int(H), int(k), int(d)
        self.kappa, self.gamma = float(kappa), float(gamma)
        self.tau = 2.0 * self.kappa**2 if tau is None else float(tau)
        self.norm = norm
        self.certificate = certificate
        self.radii = self.tau * (1.0 - self.gamma) ** np.arange(1, self.H + 1)

    @classmethod
    def from_certificate(cls, cert, H, k, d, **kw):
        return cls(H, k, d, cert.kappa, cert.gamma, certificate=cert, **kw)

    @property
    def shape(self):
        return (self.H, self.k, self.d)

    @property
    def dim(self):
        return self.H * self.k * self.d

    def _check(self, M):
        M = np.asarray(M, dtype=float)
        if M.shape != self.shape:
            raise DimensionError(f"parameters have shape {M.shape}, set expects {self.shape}")
        return M

    def block_norms(self, M):
        M = self._check(M)
        if self.norm == "frobenius" or min(self.k, self.d) == 1:
            return np.sqrt(np.einsum("pij,pij->p", M, M))
        return np.linalg.norm(M, ord=2, axis=(1, 2))

    def contains(self, M, tol=MEMBERSHIP_TOL) -> bool:
        return bool(np.all(self.block_norms(M) <= self.radii + tol))

    def project(self, M) -> np.ndarray:
        M = self._check(M)
        out = M.copy()
        norms = self.block_norms(M)
        over = np.nonzero(norms > self.radii)[0]
        if over.size == 0:
            return out
        if self.norm == "frobenius" or min(self.k, self.d) == 1:
            out[over] *= (self.radii[over] / norms[over])[:, None, None]
            return out
        try:
            U, s, Vt = np.linalg.svd(M[over], full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD failed during projection: {exc}") from exc
        s = np.minimum(s, self.radii[over][:, None])
        out[over] = np.einsum("pik,pk,pkj->pij", U, s, Vt)
        return out

    def diameter(self) -> float:
        """4 sqrt(2) kappa^2 / gamma."""
        return 4.0 * np.sqrt(2.0) * self.kappa**2 / self.gamma

    def exact_diameter(self) -> float:
        r = min(self.k, self.d) if self.norm == "spectral" else 1
        return float(2.0 * np.sqrt(r * np.sum(self.radii**2)))

    def sample(self, rng, n=1) -> np.ndarray:
        """Random feasible points: Gaussian directions scaled to a uniform fraction of each radius."""
        Z = rng.standard_normal((n,) + self.shape)
        if self.norm == "frobenius" or min(self.k, self.d) == 1:
            nrm = np.sqrt(np.einsum("npij,npij->np", Z, Z))
        else:
            nrm = np.linalg.norm(Z, ord=2, axis=(2, 3))
        frac = rng.random((n, self.H))
        return Z * (frac * self.radii / nrm)[:, :, None, None]


def project(M, dac_set: DacSet) -> np.ndarray:
    return dac_set.project(M)


def membership(M, dac_set: DacSet) -> bool:
    return dac_set.contains(M)


def diameter(dac_set: DacSet) -> float:
    return dac_set.diameter()


class DisturbanceBuffer:
    """History of recovered disturbances; reads before the first record are zero."""

    def __init__(self, dim, capacity=64):
        self.dim = int(dim)
        self._data = np.zeros((max(int(capacity), 1), self.dim))
        self._n = 0

    def __len__(self):
        return self._n

    def push(self, w):
        if self._n == self._data.shape[0]:
            grown = np.zeros((2 * self._data.shape[0], self.dim))
            grown[: self._n] = self._data
            self._data = grown
        self._data[self._n] = w
        self._n += 1

    def lag(self, p) -> np.ndarray:
        if p < 1:
            raise ValueError("lag must be at least 1")
        if p > self._n:
            return np.zeros(self.dim)
        return self._data[self._n - p].copy()

    def window(self, n) -> np.ndarray:
        """The last n records, oldest first, zero-padded at the front."""
        out = np.zeros((n, self.dim))
        m = min(n, self._n)
        if m:
            out[n - m:] = self._data[self._n - m: self._n]
        return out

    def lags(self, H) -> np.ndarray:
        """Rows p-1 = record from p rounds ago, p = 1..H."""
        return self.window(H)[::-1]


def control(K, M, buf: DisturbanceBuffer, x) -> np.ndarray:
    """-K x + sum_p M[p-1] w_{t-p}."""
    M = np.asarray(M, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    lags = buf.lags(M.shape[0])
    return -K @ np.asarray(x, float).reshape(-1) + np.einsum("pkd,pd->k", M, lags)
