# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rollout kernels.  Same contract and noise layout as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport sqrt, log, fabs
from libc.stdint cimport uint64_t
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "cython"

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TWO_POW_M53 = 1.0 / 9007199254740992.0
cdef double TWO_POW_M52 = 1.0 / 4503599627370496.0


cdef inline uint64_t _hash64(uint64_t key, uint64_t counter) noexcept nogil:
    cdef uint64_t z = key + (counter + 1) * GOLDEN
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _uniform(uint64_t key, uint64_t slot) noexcept nogil:
    return <double>(_hash64(key, 2 * slot) >> 11) * TWO_POW_M53


cdef double *AS_A = [3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
                     1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
                     3.3430575583588128105e4, 2.5090809287301226727e3]
cdef double *AS_B = [1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
                     2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
                     5.2264952788528545610e3]
cdef double *AS_C = [1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
                     3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
                     2.27238449892691845833e-2, 7.74545014278341407640e-4]
cdef double *AS_D = [1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
                     1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
                     1.05075007164441684324e-9]
cdef double *AS_E = [6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
                     2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
                     2.71155556874348757815e-5, 2.01033439929228813265e-7]
cdef double *AS_F = [1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
                     7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
                     2.04426310338993978564e-15]


cdef inline double _horner(const double* coef, double x) noexcept nogil:
    cdef double acc = coef[7]
    cdef int j
    for j in range(6, -1, -1):
        acc = acc * x + coef[j]
    return acc


cdef inline double _normal(uint64_t key, uint64_t slot) noexcept nogil:
    cdef double p = (<double>(_hash64(key, 2 * slot) >> 12) + 0.5) * TWO_POW_M52
    cdef double q = p - 0.5
    cdef double r, val
    if fabs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _horner(AS_A, r) / _horner(AS_B, r)
    r = sqrt(-log(p if q < 0.0 else 1.0 - p))
    if r <= 5.0:
        r = r - 1.6
        val = _horner(AS_C, r) / _horner(AS_D, r)
    else:
        r = r - 5.0
        val = _horner(AS_E, r) / _horner(AS_F, r)
    return -val if q < 0.0 else val


cdef inline void _draw(long code, const double* offset, const double* factor,
                       uint64_t key, uint64_t first_slot, int d,
                       double* w, double* out) noexcept nogil:
    """out = offset + factor @ w, where w holds d base variates from first_slot."""
    cdef int r, c
    cdef double acc
    if code == 0:
        for r in range(d):
            out[r] = offset[r]
        return
    if d == 1:
        if code == 2:
            out[0] = offset[0] + factor[0] * _normal(key, first_slot)
        else:
            out[0] = offset[0] + factor[0] * _uniform(key, first_slot)
        return
    for c in range(d):
        if code == 2:
            w[c] = _normal(key, first_slot + c)
        else:
            w[c] = _uniform(key, first_slot + c)
    for r in range(d):
        acc = offset[r]
        for c in range(d):
            acc = acc + factor[r * d + c] * w[c]
        out[r] = acc


cdef inline double _quad(const double* G, const double* v, int d) noexcept nogil:
    cdef int r, c
    cdef double acc = 0.0, row
    if d == 1:
        return G[0] * v[0] * v[0]
    for r in range(d):
        row = 0.0
        for c in range(d):
            row = row + G[r * d + c] * v[c]
        acc = acc + v[r] * row
    return acc


cdef inline void _matvec(const double* F, const double* v, int rows, int cols,
                         double* out) noexcept nogil:
    cdef int r, c
    cdef double acc
    for r in range(rows):
        acc = 0.0
        for c in range(cols):
            acc = acc + F[r * cols + c] * v[c]
        out[r] = acc


cdef struct NoiseTab:
    const long* codes
    const double* offsets   # (4, d)
    const double* factors   # (4, d, d)
    int d


cdef inline void _noise(NoiseTab* nt, int which, uint64_t key, uint64_t slot,
                        double* w, double* out) noexcept nogil:
    cdef int d = nt.d
    _draw(nt.codes[which], nt.offsets + which * d, nt.factors + which * d * d,
          key, slot, d, w, out)


cdef double _mkv_one(NoiseTab* nt, const double* Fy, const double* Fz, const double* Gy,
                     const double* Gz, const double* shift, double gamma, int T,
                     uint64_t key, double* buf) noexcept nogil:
    cdef int d = nt.d
    cdef double* y = buf
    cdef double* z = buf + d
    cdef double* tmp = buf + 2 * d
    cdef double* w = buf + 3 * d
    cdef double* e = buf + 4 * d
    cdef uint64_t stride = 2 * d, base
    cdef int t, r
    cdef double total = 0.0, disc = 1.0
    _noise(nt, 1, key, d, w, y)
    _noise(nt, 0, key, 0, w, z)
    for r in range(d):
        y[r] = y[r] - shift[r]
        z[r] = z[r] + shift[r]
    for t in range(T):
        total = total + disc * (_quad(Gy, y, d) + _quad(Gz, z, d))
        if t == T - 1:
            break
        base = (t + 1) * stride
        _noise(nt, 3, key, base + d, w, e)
        _matvec(Fy, y, d, d, tmp)
        for r in range(d):
            y[r] = tmp[r] + e[r]
        _noise(nt, 2, key, base, w, e)
        _matvec(Fz, z, d, d, tmp)
        for r in range(d):
            z[r] = tmp[r] + e[r]
        disc = disc * gamma
    return total


def mkv_costs(const double[:, :, ::1] Fy, const double[:, :, ::1] Fz,
              const double[:, :, ::1] Gy, const double[:, :, ::1] Gz,
              const long[::1] codes, const double[:, ::1] offsets, const double[:, :, ::1] factors,
              const double[::1] y0_shift, double gamma, int T, keys, int num_threads=1):
    cdef const uint64_t[::1] kv = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef Py_ssize_t M = kv.shape[0]
    cdef int d = offsets.shape[1]
    cdef NoiseTab nt
    out_arr = np.zeros(M)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double* buf
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    if M == 0:
        return out_arr
    nt.codes = &codes[0]
    nt.offsets = &offsets[0, 0]
    nt.factors = &factors[0, 0, 0]
    nt.d = d
    for i in prange(M, nogil=True, num_threads=num_threads, schedule="static"):
        buf = <double*> malloc(5 * d * sizeof(double))
        out[i] = _mkv_one(&nt, &Fy[i, 0, 0], &Fz[i, 0, 0], &Gy[i, 0, 0], &Gz[i, 0, 0],
                          &y0_shift[0], gamma, T, kv[i], buf)
        free(buf)
    return out_arr


cdef struct PopModel:
    const double* A
    const double* Abar
    const double* B
    const double* Bbar
    const double* Qn      # (N, d, d)
    const double* Qsum    # sum_n (Q^n + Qbar), (d, d)
    const double* R
    const double* RRbar   # R + Rbar
    int N
    int d
    int ell


cdef double _pop_one(NoiseTab* nt, PopModel* pm, const double* K, const double* L,
                     double gamma, int T, uint64_t key, double* buf) noexcept nogil:
    cdef int N = pm.N, d = pm.d, ell = pm.ell
    cdef double* X = buf
    cdef double* Xn = X + N * d
    cdef double* U = Xn + N * d
    cdef double* xbar = U + N * ell
    cdef double* ubar = xbar + d
    cdef double* dev = ubar + ell
    cdef double* du = dev + d
    cdef double* w = du + ell
    cdef double* e0 = w + d
    cdef double* e = e0 + d
    cdef double* drift = e + d
    cdef double* Lx = drift + d
    cdef uint64_t stride = (N + 1) * d, base
    cdef int t, n, r, c
    cdef double total = 0.0, disc = 1.0, acc, cost
    _noise(nt, 0, key, 0, w, e0)
    for n in range(N):
        _noise(nt, 1, key, d * (n + 1), w, X + n * d)
        for r in range(d):
            X[n * d + r] = X[n * d + r] + e0[r]
    for t in range(T):
        for r in range(d):
            acc = 0.0
            for n in range(N):
                acc = acc + X[n * d + r]
            xbar[r] = acc / N
        # u^n = -K (x^n - xbar) - L xbar
        _matvec(L, xbar, ell, d, Lx)
        for n in range(N):
            for r in range(d):
                dev[r] = X[n * d + r] - xbar[r]
            _matvec(K, dev, ell, d, U + n * ell)
            for r in range(ell):
                U[n * ell + r] = -U[n * ell + r] - Lx[r]
        for r in range(ell):
            acc = 0.0
            for n in range(N):
                acc = acc + U[n * ell + r]
            ubar[r] = acc / N
        cost = _quad(pm.Qsum, xbar, d)
        for n in range(N):
            for r in range(d):
                dev[r] = X[n * d + r] - xbar[r]
            cost = cost + _quad(pm.Qn + n * d * d, dev, d)
            for r in range(ell):
                du[r] = U[n * ell + r] - ubar[r]
            cost = cost + _quad(pm.R, du, ell)
        cost = cost / N + _quad(pm.RRbar, ubar, ell)
        total = total + disc * cost
        if t == T - 1:
            break
        base = (t + 1) * stride
        _noise(nt, 2, key, base, w, e0)
        # part of the drift shared by all agents: Abar xbar + Bbar ubar + common noise
        _matvec(pm.Abar, xbar, d, d, drift)
        _matvec(pm.Bbar, ubar, d, ell, dev)
        for r in range(d):
            drift[r] = drift[r] + dev[r] + e0[r]
        for n in range(N):
            _noise(nt, 3, key, base + d * (n + 1), w, e)
            _matvec(pm.A, X + n * d, d, d, Xn + n * d)
            _matvec(pm.B, U + n * ell, d, ell, dev)
            for r in range(d):
                Xn[n * d + r] = Xn[n * d + r] + dev[r] + drift[r] + e[r]
        for r in range(N * d):
            X[r] = Xn[r]
        disc = disc * gamma
    return total


def pop_costs(const double[:, ::1] A, const double[:, ::1] Abar, const double[:, ::1] B,
              const double[:, ::1] Bbar, const double[:, :, ::1] K, const double[:, :, ::1] L,
              const double[:, :, ::1] Qn, const double[:, ::1] Qbar, const double[:, ::1] R,
              const double[:, ::1] Rbar, const long[::1] codes, const double[:, ::1] offsets,
              const double[:, :, ::1] factors, double gamma, int T, keys, int num_threads=1):
    cdef const uint64_t[::1] kv = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef Py_ssize_t M = kv.shape[0]
    cdef int N = Qn.shape[0]
    cdef int d = Qn.shape[1]
    cdef int ell = B.shape[1]
    cdef NoiseTab nt
    cdef PopModel pm
    qsum_arr = np.ascontiguousarray(np.asarray(Qn).sum(axis=0) + N * np.asarray(Qbar))
    rrbar_arr = np.ascontiguousarray(np.asarray(R) + np.asarray(Rbar))
    cdef const double[:, ::1] qsum = qsum_arr
    cdef const double[:, ::1] rrbar = rrbar_arr
    out_arr = np.zeros(M)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double* buf
    cdef size_t nbuf = 2 * N * d + N * ell + 6 * d + 3 * ell + d
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    if M == 0:
        return out_arr
    nt.codes = &codes[0]
    nt.offsets = &offsets[0, 0]
    nt.factors = &factors[0, 0, 0]
    nt.d = d
    pm.A = &A[0, 0]
    pm.Abar = &Abar[0, 0]
    pm.B = &B[0, 0]
    pm.Bbar = &Bbar[0, 0]
    pm.Qn = &Qn[0, 0, 0]
    pm.Qsum = &qsum[0, 0]
    pm.R = &R[0, 0]
    pm.RRbar = &rrbar[0, 0]
    pm.N = N
    pm.d = d
    pm.ell = ell
    for i in prange(M, nogil=True, num_threads=num_threads, schedule="static"):
        buf = <double*> malloc(nbuf * sizeof(double))
        out[i] = _pop_one(&nt, &pm, &K[i, 0, 0], &L[i, 0, 0], gamma, T, kv[i], buf)
        free(buf)
    return out_arr
