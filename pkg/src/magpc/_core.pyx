# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: the fused multi-agent round loop and affine counterfactual maps."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite, NAN

cnp.import_array()


def run_gpc_core(double[:, ::1] A, double[:, :, ::1] B, double[:, :, ::1] K,
                 double[:, :, ::1] C, double[:, :, ::1] S,
                 int[::1] ks, int[::1] Hs, int[::1] setting, double[::1] eta,
                 double[:, ::1] radii, int[::1] frob, double[:, :, :, ::1] M,
                 double[::1] qx, double[:, :, ::1] qa, double[:, :, ::1] hx,
                 double[::1] qu, double[:, :, ::1] qb, double[:, :, ::1] hu, double[:, ::1] qe,
                 double[:, ::1] w, double[::1] x0, double guard, int record,
                 double[:, ::1] xs, double[:, :, ::1] us, double[:, :, ::1] west,
                 double[:, ::1] cost, double[:, ::1] loss, double[:, :, :, :, ::1] Mhist,
                 double[:, :, ::1] drive, object svd_project):
    """Returns -1 on success, otherwise the first round whose state norm exceeded `guard`."""
    cdef int T = w.shape[0]
    cdef int d = A.shape[0]
    cdef int N = B.shape[0]
    cdef int kmax = B.shape[2]
    cdef int Hmax = M.shape[1]
    cdef int t, i, j, p, a, b, s, H, k, s_lo
    cdef double acc, nrm, scale, val, r
    cdef double[::1] x = np.zeros(d)
    cdef double[::1] xn = np.zeros(d)
    cdef double[::1] z = np.zeros(d)
    cdef double[::1] tmp = np.zeros(d)
    cdef double[::1] rr = np.zeros(d)
    cdef double[::1] gy = np.zeros(d)
    cdef double[::1] y = np.zeros(d)
    cdef double[::1] dac = np.zeros(kmax)
    cdef double[::1] v = np.zeros(kmax)
    cdef double[::1] gu = np.zeros(kmax)
    cdef double[::1] lam = np.zeros(kmax)
    cdef double[:, ::1] ff = np.zeros((N, kmax))
    cdef double[:, ::1] push = np.zeros((N, d))
    cdef double[::1] total = np.zeros(d)
    cdef double[:, :, ::1] grad = np.zeros((Hmax, kmax, d))
    cdef double[:, :] blkv

    for a in range(d):
        x[a] = x0[a]
        xs[0, a] = x0[a]

    for t in range(T):
        if record:
            Mhist[t, :, :, :, :] = M
        # act
        for i in range(N):
            k = ks[i]
            H = Hs[i]
            for a in range(k):
                acc = 0.0
                for p in range(1, H + 1):
                    if t - p >= 0:
                        for b in range(d):
                            acc += M[i, p - 1, a, b] * west[i, t - p, b]
                ff[i, a] = acc
                val = 0.0
                for b in range(d):
                    val -= K[i, a, b] * x[b]
                us[i, t, a] = val + acc
            # incurred cost
            val = qe[i, t]
            for b in range(d):
                r = x[b] - qa[i, t, b]
                val += qx[i] * r * r + hx[i, t, b] * x[b]
            for a in range(k):
                r = us[i, t, a] - qb[i, t, a]
                val += qu[i] * r * r + hu[i, t, a] * us[i, t, a]
            cost[i, t] = val
        # plant
        for a in range(d):
            total[a] = 0.0
        for i in range(N):
            k = ks[i]
            for a in range(d):
                acc = 0.0
                for b in range(k):
                    acc += B[i, a, b] * us[i, t, b]
                push[i, a] = acc
                total[a] += acc
        nrm = 0.0
        for a in range(d):
            acc = w[t, a]
            for b in range(d):
                acc += A[a, b] * x[b]
            xn[a] = acc + total[a]
            nrm += xn[a] * xn[a]
        if not isfinite(nrm) or sqrt(nrm) > guard:
            return t + 1
        # learn
        for i in range(N):
            if eta[i] <= 0.0:
                loss[i, t] = NAN
                continue
            k = ks[i]
            H = Hs[i]
            s_lo = t - 1 - H
            if s_lo < 0:
                s_lo = 0
            for a in range(d):
                z[a] = 0.0
            for s in range(s_lo, t):
                for a in range(k):
                    acc = 0.0
                    for p in range(1, H + 1):
                        if s - p >= 0:
                            for b in range(d):
                                acc += M[i, p - 1, a, b] * west[i, s - p, b]
                    dac[a] = acc
                for a in range(d):
                    acc = drive[i, s, a]
                    for b in range(d):
                        acc += C[i, a, b] * z[b]
                    for b in range(k):
                        acc += B[i, a, b] * dac[b]
                    tmp[a] = acc
                for a in range(d):
                    z[a] = tmp[a]
            val = qe[i, t]
            for a in range(d):
                y[a] = z[a]
                r = y[a] - qa[i, t, a]
                val += qx[i] * r * r + hx[i, t, a] * y[a]
                gy[a] = 2.0 * qx[i] * r + hx[i, t, a]
            for a in range(k):
                acc = ff[i, a]
                for b in range(d):
                    acc -= K[i, a, b] * y[b]
                v[a] = acc
                r = acc - qb[i, t, a]
                val += qu[i] * r * r + hu[i, t, a] * acc
                gu[a] = 2.0 * qu[i] * r + hu[i, t, a]
            loss[i, t] = val
            # backward pass
            for a in range(d):
                acc = gy[a]
                for b in range(k):
                    acc -= K[i, b, a] * gu[b]
                rr[a] = acc
            for p in range(H):
                for a in range(k):
                    for b in range(d):
                        grad[p, a, b] = 0.0
            for s in range(t - 1, s_lo - 1, -1):
                for a in range(k):
                    acc = 0.0
                    for b in range(d):
                        acc += B[i, b, a] * rr[b]
                    lam[a] = acc
                for p in range(1, H + 1):
                    if s - p >= 0:
                        for a in range(k):
                            for b in range(d):
                                grad[p - 1, a, b] += lam[a] * west[i, s - p, b]
                for a in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc += C[i, b, a] * rr[b]
                    tmp[a] = acc
                for a in range(d):
                    rr[a] = tmp[a]
            for p in range(1, H + 1):
                if t - p >= 0:
                    for a in range(k):
                        for b in range(d):
                            grad[p - 1, a, b] += gu[a] * west[i, t - p, b]
            # projected step
            for p in range(H):
                nrm = 0.0
                for a in range(k):
                    for b in range(d):
                        M[i, p, a, b] -= eta[i] * grad[p, a, b]
                        nrm += M[i, p, a, b] * M[i, p, a, b]
                if frob[i] or k == 1 or d == 1:
                    nrm = sqrt(nrm)
                    if nrm > radii[i, p]:
                        scale = radii[i, p] / nrm
                        for a in range(k):
                            for b in range(d):
                                M[i, p, a, b] *= scale
                else:
                    blk = svd_project(np.asarray(M[i, p, :k, :]), radii[i, p])
                    if blk is not None:
                        blkv = blk
                        M[i, p, :k, :] = blkv
        # recover signals
        for i in range(N):
            k = ks[i]
            for a in range(d):
                acc = xn[a]
                for b in range(d):
                    acc -= A[a, b] * x[b]
                acc -= push[i, a]
                if setting[i] == 1:
                    west[i, t, a] = acc
                    drive[i, t, a] = acc
                else:
                    val = total[a] - push[i, a]
                    west[i, t, a] = acc - val
                    r = 0.0
                    for b in range(d):
                        r += S[i, a, b] * x[b]
                    drive[i, t, a] = west[i, t, a] + val + r
        for a in range(d):
            x[a] = xn[a]
            xs[t + 1, a] = xn[a]
    if record:
        Mhist[T, :, :, :, :] = M
    return -1


def affine_maps_core(double[:, ::1] A, double[:, ::1] Bi, double[:, ::1] Ki,
                     double[:, ::1] omega, double[:, ::1] other, double[::1] x_start,
                     int start, int end, int H,
                     double[:, ::1] X0, double[:, :, ::1] J, double[:, ::1] U0, double[:, :, ::1] F):
    """Counterfactual state/control of a DAC comparator, affine in its flattened parameters."""
    cdef int d = A.shape[0]
    cdef int k = Bi.shape[1]
    cdef int m = H * k * d
    cdef int n = end - start
    cdef int t, r, a, b, c, p, col
    cdef double acc
    for a in range(d):
        X0[0, a] = x_start[a]
        for c in range(m):
            J[0, a, c] = 0.0
    for r in range(n):
        t = start + r
        for a in range(k):
            acc = 0.0
            for b in range(d):
                acc -= Ki[a, b] * X0[r, b]
            U0[r, a] = acc
            for c in range(m):
                acc = 0.0
                for b in range(d):
                    acc -= Ki[a, b] * J[r, b, c]
                F[r, a, c] = acc
            for p in range(1, H + 1):
                if t - p >= 0:
                    col = ((p - 1) * k + a) * d
                    for b in range(d):
                        F[r, a, col + b] += omega[t - p, b]
        if r + 1 < n:
            for a in range(d):
                acc = other[t, a]
                for b in range(d):
                    acc += A[a, b] * X0[r, b]
                for b in range(k):
                    acc += Bi[a, b] * U0[r, b]
                X0[r + 1, a] = acc
                for c in range(m):
                    acc = 0.0
                    for b in range(d):
                        acc += A[a, b] * J[r, b, c]
                    for b in range(k):
                        acc += Bi[a, b] * F[r, b, c]
                    J[r + 1, a, c] = acc
    return n


cdef void _project_blocks(double[::1] v, double[::1] radii, int nblk, int bs):
    cdef int p, c
    cdef double nrm, scale
    for p in range(nblk):
        nrm = 0.0
        for c in range(bs):
            nrm += v[p * bs + c] * v[p * bs + c]
        nrm = sqrt(nrm)
        if nrm > radii[p]:
            scale = radii[p] / nrm
            for c in range(bs):
                v[p * bs + c] *= scale


def fista_blocks_core(double[:, ::1] P, double[::1] q, double[::1] radii, double[::1] x,
                      int iters, double tol, double L):
    """Accelerated projected gradient for m'Pm + 2q'm over a product of Euclidean balls.

    `x` (length nblk * block size) is the start point and receives the result.
    Returns (iterations used, last gradient-mapping norm).
    """
    cdef int m = x.shape[0]
    cdef int nblk = radii.shape[0]
    cdef int bs = m // nblk
    cdef int it, a, b
    cdef double acc, tk = 1.0, tn, mom, gn = 1e300, dot
    cdef double[::1] y = np.array(x, dtype=float)
    cdef double[::1] xn = np.zeros(m)
    cdef double[::1] xm = np.zeros(m)
    _project_blocks(x, radii, nblk, bs)
    y[:] = x
    it = 0
    while it < iters:
        it += 1
        for a in range(m):
            acc = q[a]
            for b in range(m):
                acc += P[a, b] * y[b]
            xn[a] = y[a] - 2.0 * acc / L
        _project_blocks(xn, radii, nblk, bs)
        if it % 10 == 0 or it == iters:
            for a in range(m):
                acc = q[a]
                for b in range(m):
                    acc += P[a, b] * xn[b]
                xm[a] = xn[a] - 2.0 * acc / L
            _project_blocks(xm, radii, nblk, bs)
            acc = 0.0
            for a in range(m):
                acc += (xn[a] - xm[a]) * (xn[a] - xm[a])
            gn = L * sqrt(acc)
            if gn <= tol:
                x[:] = xn
                break
        tn = 0.5 * (1.0 + sqrt(1.0 + 4.0 * tk * tk))
        dot = 0.0
        for a in range(m):
            dot += (y[a] - xn[a]) * (xn[a] - x[a])
        if dot > 0:
            tn = 1.0
            y[:] = xn
        else:
            mom = (tk - 1.0) / tn
            for a in range(m):
                y[a] = xn[a] + mom * (xn[a] - x[a])
        x[:] = xn
        tk = tn
    return it, gn
