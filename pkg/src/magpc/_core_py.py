"""Pure-numpy versions of the compiled loops; same signatures and in-place outputs."""

import numpy as np


def run_gpc_core(A, B, K, C, S, ks, Hs, setting, eta, radii, frob, M,
                 qx, qa, hx, qu, qb, hu, qe, w, x0, guard, record,
                 xs, us, west, cost, loss, Mhist, drive, svd_project):
    T, d = w.shape
    N = B.shape[0]
    x = np.array(x0, dtype=float)
    xs[0] = x
    for t in range(T):
        if record:
            Mhist[t] = M
        ff = []
        for i in range(N):
            k, H = ks[i], Hs[i]
            lo = max(t - H, 0)
            lags = west[i, lo:t][::-1]
            f = np.einsum("pkd,pd->k", M[i, : t - lo, :k], lags) if t > lo else np.zeros(k)
            ff.append(f)
            u = -K[i, :k] @ x + f
            us[i, t, :k] = u
            ex = x - qa[i, t]
            eu = u - qb[i, t, :k]
            cost[i, t] = qe[i, t] + qx[i] * (ex @ ex) + hx[i, t] @ x + qu[i] * (eu @ eu) + hu[i, t, :k] @ u
        push = np.stack([B[i, :, : ks[i]] @ us[i, t, : ks[i]] for i in range(N)])
        total = push.sum(axis=0)
        xn = A @ x + w[t] + total
        nrm = float(np.sqrt(xn @ xn))
        if not np.isfinite(nrm) or nrm > guard:
            return t + 1
        for i in range(N):
            if eta[i] <= 0.0:
                loss[i, t] = np.nan
                continue
            k, H = ks[i], Hs[i]
            Bi, Ki, Ci, Mi = B[i, :, :k], K[i, :k], C[i], M[i, :H, :k]
            s_lo = max(t - 1 - H, 0)
            z = np.zeros(d)
            for s in range(s_lo, t):
                lo = max(s - H, 0)
                dac = np.einsum("pkd,pd->k", Mi[: s - lo], west[i, lo:s][::-1]) if s > lo else np.zeros(k)
                z = Ci @ z + Bi @ dac + drive[i, s]
            y = z
            v = ff[i] - Ki @ y
            ey = y - qa[i, t]
            ev = v - qb[i, t, :k]
            loss[i, t] = qe[i, t] + qx[i] * (ey @ ey) + hx[i, t] @ y + qu[i] * (ev @ ev) + hu[i, t, :k] @ v
            gy = 2.0 * qx[i] * ey + hx[i, t]
            gu = 2.0 * qu[i] * ev + hu[i, t, :k]
            r = gy - Ki.T @ gu
            grad = np.zeros((H, k, d))
            for s in range(t - 1, s_lo - 1, -1):
                lam = Bi.T @ r
                lo = max(s - H, 0)
                if s > lo:
                    grad[: s - lo] += lam[None, :, None] * west[i, lo:s][::-1][:, None, :]
                r = Ci.T @ r
            lo = max(t - H, 0)
            if t > lo:
                grad[: t - lo] += gu[None, :, None] * west[i, lo:t][::-1][:, None, :]
            Mi = Mi - eta[i] * grad
            for p in range(H):
                blk = Mi[p]
                if frob[i] or k == 1 or d == 1:
                    n = np.sqrt(np.sum(blk * blk))
                    if n > radii[i, p]:
                        Mi[p] = blk * (radii[i, p] / n)
                else:
                    out = svd_project(blk, radii[i, p])
                    if out is not None:
                        Mi[p] = out
            M[i, :H, :k] = Mi
        for i in range(N):
            proxy = xn - A @ x - push[i]
            if setting[i] == 1:
                west[i, t] = proxy
                drive[i, t] = proxy
            else:
                agg = total - push[i]
                west[i, t] = proxy - agg
                drive[i, t] = west[i, t] + agg + S[i] @ x
        x = xn
        xs[t + 1] = x
    if record:
        Mhist[T] = M
    return -1


def affine_maps_core(A, Bi, Ki, omega, other, x_start, start, end, H, X0, J, U0, F):
    d, k = Bi.shape
    n = end - start
    X0[0] = x_start
    J[0] = 0.0
    for r in range(n):
        t = start + r
        U0[r] = -Ki @ X0[r]
        F[r] = -Ki @ J[r]
        for p in range(1, H + 1):
            if t - p >= 0:
                col = (p - 1) * k * d
                F[r, :, col: col + k * d] += np.kron(np.eye(k), omega[t - p][None, :])
        if r + 1 < n:
            X0[r + 1] = A @ X0[r] + Bi @ U0[r] + other[t]
            J[r + 1] = A @ J[r] + Bi @ F[r]
    return n


def _project_blocks(v, radii):
    blk = v.reshape(radii.size, -1)
    n = np.sqrt(np.einsum("pc,pc->p", blk, blk))
    over = n > radii
    blk[over] *= (radii[over] / n[over])[:, None]


def fista_blocks_core(P, q, radii, x, iters, tol, L):
    _project_blocks(x, radii)
    y = x.copy()
    tk, gn, it = 1.0, 1e300, 0
    while it < iters:
        it += 1
        xn = y - 2.0 * (P @ y + q) / L
        _project_blocks(xn, radii)
        if it % 10 == 0 or it == iters:
            xm = xn - 2.0 * (P @ xn + q) / L
            _project_blocks(xm, radii)
            gn = L * float(np.sqrt(np.sum((xn - xm) ** 2)))
            if gn <= tol:
                x[:] = xn
                break
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        if (y - xn) @ (xn - x) > 0:
            tn = 1.0
            y = xn.copy()
        else:
            y = xn + ((tk - 1.0) / tn) * (xn - x)
        x[:] = xn
        tk = tn
    return it, gn
