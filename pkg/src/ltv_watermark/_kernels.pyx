# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: closed-loop recursion and sliding-window Wishart metric."""

import numpy as np
from libc.math cimport log, sqrt

NAME = "compiled"


cdef inline void matvec(const double[:, ::1] M, const double* v, double* out,
                        Py_ssize_t rows, Py_ssize_t cols) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc = acc + M[i, j] * v[j]
        out[i] = acc


def closed_loop(const double[:, :, ::1] A, const double[:, :, ::1] B, const double[:, :, ::1] C,
                const double[:, :, ::1] K, const double[:, :, ::1] L,
                const double[:, ::1] w, const double[:, ::1] z, const double[:, ::1] e,
                const double[:, ::1] omega, const double[:, ::1] zeta,
                double alpha, Py_ssize_t start):
    cdef Py_ssize_t N = w.shape[0], p = w.shape[1], r = z.shape[1], q = e.shape[1]
    x_a = np.zeros((N, p)); xh_a = np.zeros((N, p)); y_a = np.zeros((N, r))
    v_a = np.zeros((N, r)); db_a = np.zeros((N, p)); dh_a = np.zeros((N, p)); xi_a = np.zeros((N, p))
    cdef double[:, ::1] x = x_a, xh = xh_a, y = y_a, v = v_a, db = db_a, dh = dh_a, xi = xi_a
    work_a = np.zeros(16 * (p + q + r) + 16)
    cdef double[::1] work = work_a
    cdef double* W = &work[0]
    # scratch layout: state vectors then temporaries
    cdef double* xc = W
    cdef double* xhc = xc + p
    cdef double* dbc = xhc + p
    cdef double* dhc = dbc + p
    cdef double* xic = dhc + p
    cdef double* t1 = xic + p          # p
    cdef double* t2 = t1 + p           # p
    cdef double* t3 = t2 + p           # p
    cdef double* ubuf = t3 + p         # q
    cdef double* ybuf = ubuf + q       # r
    cdef double* vbuf = ybuf + r       # r
    cdef double* rbuf = vbuf + r       # r
    cdef double* cx = rbuf + r         # r
    cdef double* nx = cx + r           # p
    cdef double* nxh = nx + p          # p
    cdef Py_ssize_t n, i, j
    cdef double acc
    with nogil:
        for n in range(N):
            for i in range(p):
                x[n, i] = xc[i]; xh[n, i] = xhc[i]; db[n, i] = dbc[i]
                dh[n, i] = dhc[i]; xi[n, i] = xic[i]
            matvec(C[n], xc, cx, r, p)
            if n >= start:
                matvec(C[n], xic, rbuf, r, p)
                for i in range(r):
                    vbuf[i] = alpha * (cx[i] + z[n, i]) + rbuf[i] + zeta[n, i]
                # xi <- (A + B K) xi + omega
                matvec(K[n], xic, ubuf, q, p)
                matvec(A[n], xic, t1, p, p)
                matvec(B[n], ubuf, t2, p, q)
                for i in range(p):
                    xic[i] = t1[i] + t2[i] + omega[n, i]
            else:
                for i in range(r):
                    vbuf[i] = 0.0
            for i in range(r):
                ybuf[i] = cx[i] + z[n, i] + vbuf[i]
                y[n, i] = ybuf[i]
                v[n, i] = vbuf[i]
            # u = K x_hat ; t3 = B (u + e)
            matvec(K[n], xhc, ubuf, q, p)
            for i in range(q):
                ubuf[i] = ubuf[i] + e[n, i]
            matvec(B[n], ubuf, t3, p, q)
            # plant
            matvec(A[n], xc, t1, p, p)
            for i in range(p):
                nx[i] = t1[i] + t3[i] + w[n, i]
            # observer: A xh + B(u+e) + L (C xh - y)
            matvec(C[n], xhc, rbuf, r, p)
            for i in range(r):
                rbuf[i] = rbuf[i] - ybuf[i]
            matvec(A[n], xhc, t1, p, p)
            matvec(L[n], rbuf, t2, p, r)
            for i in range(p):
                nxh[i] = t1[i] + t3[i] + t2[i]
            # delta_bar <- (A + L C) delta_bar - w - L z
            matvec(C[n], dbc, rbuf, r, p)
            for i in range(r):
                rbuf[i] = rbuf[i] - z[n, i]
            matvec(A[n], dbc, t1, p, p)
            matvec(L[n], rbuf, t2, p, r)
            for i in range(p):
                dbc[i] = t1[i] + t2[i] - w[n, i]
            # delta_hat <- (A + L C) delta_hat - L v
            matvec(C[n], dhc, rbuf, r, p)
            for i in range(r):
                rbuf[i] = rbuf[i] - vbuf[i]
            matvec(A[n], dhc, t1, p, p)
            matvec(L[n], rbuf, t2, p, r)
            for i in range(p):
                dhc[i] = t1[i] + t2[i]
            for i in range(p):
                xc[i] = nx[i]; xhc[i] = nxh[i]
    return x_a, xh_a, y_a, v_a, db_a, dh_a, xi_a


cdef inline bint chol_logdet(double* Q, double* Lw, Py_ssize_t d, double* out) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef double s, ld = 0.0
    for i in range(d):
        for j in range(i + 1):
            s = Q[i * d + j]
            for k in range(j):
                s = s - Lw[i * d + k] * Lw[j * d + k]
            if i == j:
                if not s > 0.0:
                    return False
                Lw[i * d + i] = sqrt(s)
                ld = ld + log(s)
            else:
                Lw[i * d + j] = s / Lw[j * d + j]
    out[0] = ld
    return True


def window_metric(const double[:, ::1] psi, const double[:, ::1] s_inv, Py_ssize_t window,
                  double coef, Py_ssize_t recompute_every=1024):
    """Incremental sliding-window metric with periodic full recomputation of ``Q``."""
    cdef Py_ssize_t M = psi.shape[0], d = psi.shape[1]
    metric_a = np.full(M, np.nan)
    flag_a = np.zeros(M, dtype=np.uint8)
    cdef double[::1] metric = metric_a
    cdef unsigned char[::1] flag = flag_a
    Q_a = np.zeros(d * d)
    L_a = np.zeros(d * d)
    cdef double[::1] Qv = Q_a, Lv = L_a
    cdef double* Q = &Qv[0]
    cdef double* Lw = &Lv[0]
    cdef Py_ssize_t n, i, j, k, old, since = 0
    cdef double tr, ld
    if M == 0 or d == 0:
        return metric_a, flag_a
    with nogil:
        for n in range(M):
            since = since + 1
            if since >= recompute_every and n >= window:
                since = 0
                for i in range(d * d):
                    Q[i] = 0.0
                for k in range(n - window + 1, n + 1):
                    for i in range(d):
                        for j in range(d):
                            Q[i * d + j] = Q[i * d + j] + psi[k, i] * psi[k, j]
            else:
                for i in range(d):
                    for j in range(d):
                        Q[i * d + j] = Q[i * d + j] + psi[n, i] * psi[n, j]
                if n >= window:
                    old = n - window
                    for i in range(d):
                        for j in range(d):
                            Q[i * d + j] = Q[i * d + j] - psi[old, i] * psi[old, j]
            if n >= window - 1:
                tr = 0.0
                for i in range(d):
                    for j in range(d):
                        tr = tr + s_inv[i, j] * Q[i * d + j]
                if chol_logdet(Q, Lw, d, &ld):
                    metric[n] = coef * ld + tr
                else:
                    flag[n] = 1
    return metric_a, flag_a
