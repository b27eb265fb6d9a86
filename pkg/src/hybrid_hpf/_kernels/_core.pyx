# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.  Semantics match ``_fallback`` bit-for-bit in intent."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, M_PI

cnp.import_array()

cdef double TWO_PI_3 = 2.0 * M_PI / 3.0


def toeplitz_assemble(blocks, orders, Py_ssize_t offset):
    cdef const double complex[:, :, ::1] B = np.ascontiguousarray(blocks, dtype=np.complex128)
    cdef const long long[::1] h = np.ascontiguousarray(orders, dtype=np.int64)
    cdef Py_ssize_t K = B.shape[0], r = B.shape[1], c = B.shape[2], n = h.shape[0]
    out_arr = np.zeros((r * n, c * n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_arr
    cdef Py_ssize_t a, b, i, j, k
    for a in range(n):
        for b in range(n):
            k = h[a] - h[b] + offset
            if k < 0 or k >= K:
                continue
            for i in range(r):
                for j in range(c):
                    out[i * n + a, j * n + b] = B[k, i, j]
    return out_arr


cdef void _eval_periodic(const double[:, :, ::1] C, const double[:, :, ::1] S, double w0, double t,
                         double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t K = C.shape[0], n = C.shape[1], m = C.shape[2], k, i, j
    cdef double ck, sk
    for i in range(n):
        for j in range(m):
            out[i, j] = C[0, i, j]
    for k in range(1, K):
        ck = cos(k * w0 * t)
        sk = sin(k * w0 * t)
        for i in range(n):
            for j in range(m):
                out[i, j] += C[k, i, j] * ck + S[k, i, j] * sk


cdef void _matvec_add(const double[:, ::1] A, double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = A.shape[0], m = A.shape[1], i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += A[i, j] * x[j]
        out[i] += acc


cdef void _periodic_rhs(double t, double[::1] x, const double[:, :, ::1] Ac, const double[:, :, ::1] As,
                        const double[:, :, ::1] bc, const double[:, :, ::1] bs, double w0,
                        double[:, ::1] At, double[:, ::1] bt, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], i
    _eval_periodic(Ac, As, w0, t, At)
    _eval_periodic(bc, bs, w0, t, bt)
    for i in range(n):
        out[i] = bt[i, 0]
    _matvec_add(At, x, out)


def rk4_periodic(Ac, As, bc, bs, double w0, x0, double t0, double dt, Py_ssize_t nsteps,
                 Py_ssize_t stride):
    cdef const double[:, :, ::1] cAc = np.ascontiguousarray(Ac, dtype=np.float64)
    cdef const double[:, :, ::1] cAs = np.ascontiguousarray(As, dtype=np.float64)
    cdef const double[:, :, ::1] cbc = np.ascontiguousarray(np.asarray(bc, dtype=np.float64)[:, :, None])
    cdef const double[:, :, ::1] cbs = np.ascontiguousarray(np.asarray(bs, dtype=np.float64)[:, :, None])
    x_arr = np.array(x0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef Py_ssize_t n = x.shape[0], nrec = nsteps // stride, s, i
    out_arr = np.empty((nrec, n))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] At = np.empty((n, n))
    cdef double[:, ::1] bt = np.empty((n, 1))
    cdef double[::1] k1 = np.empty(n), k2 = np.empty(n), k3 = np.empty(n), k4 = np.empty(n)
    cdef double[::1] y = np.empty(n)
    cdef double t = t0
    with nogil:
        for s in range(nsteps):
            if s % stride == 0 and s // stride < nrec:
                for i in range(n):
                    out[s // stride, i] = x[i]
            _periodic_rhs(t, x, cAc, cAs, cbc, cbs, w0, At, bt, k1)
            for i in range(n):
                y[i] = x[i] + 0.5 * dt * k1[i]
            _periodic_rhs(t + 0.5 * dt, y, cAc, cAs, cbc, cbs, w0, At, bt, k2)
            for i in range(n):
                y[i] = x[i] + 0.5 * dt * k2[i]
            _periodic_rhs(t + 0.5 * dt, y, cAc, cAs, cbc, cbs, w0, At, bt, k3)
            for i in range(n):
                y[i] = x[i] + dt * k3[i]
            _periodic_rhs(t + dt, y, cAc, cAs, cbc, cbs, w0, At, bt, k4)
            for i in range(n):
                x[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            t = t0 + (s + 1) * dt
    return x_arr, out_arr


cdef void _matvec(const double[:, ::1] A, double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = A.shape[0], m = A.shape[1], i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += A[i, j] * x[j]
        out[i] = acc


cdef void _cosim_rhs(double t, double[::1] y, const double[:, :, ::1] pc,
                     const double[:, :, ::1] ps, double w0, const long long[:, ::1] idx,
                     const double[:, ::1] par, double[:, ::1] xp, double[::1] out) noexcept nogil:
    # converter terms evaluated on the full state y + x_p(t)
    cdef Py_ssize_t n = y.shape[0], i, m, p
    cdef double th, i2d, i2q, ed, eq, ud, uq, vdc, wv, up, pbr, zd, zq
    cdef double c[3]
    cdef double s[3]
    cdef double i1[3]
    _eval_periodic(pc, ps, w0, t, xp)
    for i in range(n):
        out[i] = 0.0
    for m in range(idx.shape[0]):
        th = w0 * t + par[m, 0]
        c[0] = cos(th); s[0] = sin(th)
        c[1] = cos(th - TWO_PI_3); s[1] = sin(th - TWO_PI_3)
        c[2] = cos(th + TWO_PI_3); s[2] = sin(th + TWO_PI_3)
        vdc = y[idx[m, 8]] + xp[idx[m, 8], 0]
        wv = (y[idx[m, 9]] + xp[idx[m, 9], 0]) if idx[m, 9] >= 0 else 0.0
        zd = y[idx[m, 6]] + xp[idx[m, 6], 0]
        zq = y[idx[m, 7]] + xp[idx[m, 7], 0]
        i2d = 0.0
        i2q = 0.0
        for p in range(3):
            i1[p] = y[idx[m, p]] + xp[idx[m, p], 0]
            i2d += c[p] * (y[idx[m, 3 + p]] + xp[idx[m, 3 + p], 0])
            i2q -= s[p] * (y[idx[m, 3 + p]] + xp[idx[m, 3 + p], 0])
        i2d *= 2.0 / 3.0
        i2q *= 2.0 / 3.0
        ed = par[m, 1] + par[m, 3] * vdc - par[m, 4] * wv - i2d
        eq = par[m, 2] - i2q
        out[idx[m, 6]] += ed
        out[idx[m, 7]] += eq
        if idx[m, 9] >= 0:
            out[idx[m, 9]] += par[m, 9] - vdc
        ud = par[m, 5] * ed + par[m, 6] * zd
        uq = par[m, 5] * eq + par[m, 6] * zq
        pbr = 0.0
        for p in range(3):
            up = ud * c[p] - uq * s[p]
            out[idx[m, p]] += up * vdc * par[m, 7]
            pbr += up * i1[p]
        out[idx[m, 8]] -= (2.0 / 3.0) * pbr * par[m, 8]


def lawson_cosim(E, pc, ps, double w0, nic_idx, nic_par, x0, double t0, double dt,
                 Py_ssize_t nsteps, Py_ssize_t stride):
    cdef const double[:, ::1] cE = np.ascontiguousarray(E, dtype=np.float64)
    cdef const double[:, :, ::1] cpc = np.ascontiguousarray(np.asarray(pc, dtype=np.float64)[:, :, None])
    cdef const double[:, :, ::1] cps = np.ascontiguousarray(np.asarray(ps, dtype=np.float64)[:, :, None])
    cdef const long long[:, ::1] idx = np.ascontiguousarray(np.asarray(nic_idx, dtype=np.int64).reshape(-1, 10))
    cdef const double[:, ::1] par = np.ascontiguousarray(np.asarray(nic_par, dtype=np.float64).reshape(-1, 10))
    x_arr = np.array(x0, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef Py_ssize_t n = x.shape[0], nrec = nsteps // stride, s, i
    out_arr = np.empty((nrec, n))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xp = np.empty((n, 1))
    cdef double[::1] k1 = np.empty(n), k2 = np.empty(n), k3 = np.empty(n), k4 = np.empty(n)
    cdef double[::1] y = np.empty(n), ex = np.empty(n), w = np.empty(n)
    cdef double t = t0, h = dt
    with nogil:
        _eval_periodic(cpc, cps, w0, t0, xp)
        for i in range(n):
            x[i] -= xp[i, 0]
        for s in range(nsteps):
            if s % stride == 0 and s // stride < nrec:
                _eval_periodic(cpc, cps, w0, t, xp)
                for i in range(n):
                    out[s // stride, i] = x[i] + xp[i, 0]
            _cosim_rhs(t, x, cpc, cps, w0, idx, par, xp, k1)
            _matvec(cE, x, ex)
            for i in range(n):
                w[i] = x[i] + 0.5 * h * k1[i]
            _matvec(cE, w, y)
            _cosim_rhs(t + 0.5 * h, y, cpc, cps, w0, idx, par, xp, k2)
            for i in range(n):
                y[i] = ex[i] + 0.5 * h * k2[i]
            _cosim_rhs(t + 0.5 * h, y, cpc, cps, w0, idx, par, xp, k3)
            for i in range(n):
                w[i] = ex[i] + h * k3[i]
            _matvec(cE, w, y)
            _cosim_rhs(t + h, y, cpc, cps, w0, idx, par, xp, k4)
            for i in range(n):
                w[i] = x[i] + (h / 6.0) * k1[i]
            _matvec(cE, w, y)
            for i in range(n):
                w[i] = y[i] + (h / 3.0) * (k2[i] + k3[i])
            _matvec(cE, w, y)
            for i in range(n):
                x[i] = y[i] + (h / 6.0) * k4[i]
            t = t0 + (s + 1) * h
        _eval_periodic(cpc, cps, w0, t, xp)
        for i in range(n):
            x[i] += xp[i, 0]
    return x_arr, out_arr
