# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched CRB-trace kernels.

Same contract as ``masense._kernels_py``; see that module for the maths.
Inputs must already be C-contiguous float64 / complex128 arrays, which
``masense.kernels`` guarantees.
"""
import numpy as np

from libc.math cimport cos, sin, sqrt, NAN

BACKEND = "cython"

ctypedef double complex cplx


cdef inline double _abs2(cplx z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef inline cplx _conj(cplx z) noexcept nogil:
    return z.real - 1j * z.imag


cdef void _fill_row(cplx* e, double px, double py, const double* u, const double* v,
                    int K, double wn) noexcept nogil:
    cdef int k
    cdef double ph
    cdef cplx a
    for k in range(K):
        ph = wn * (px * u[k] + py * v[k])
        a = cos(ph) + 1j * sin(ph)
        e[k] = a
        e[K + k] = (1j * wn * px) * a
        e[2 * K + k] = (1j * wn * py) * a


cdef void _add_outer(cplx* Q, const cplx* e, int n3) noexcept nogil:
    cdef int i, j
    cdef cplx ci
    for i in range(n3):
        ci = _conj(e[i])
        for j in range(n3):
            Q[i * n3 + j] += ci * e[j]


cdef int _trace_one(const cplx* Q, const cplx* rs2, int K, double tol,
                    cplx* L, cplx* W, double* H, double* Lh, double* z,
                    double* out) noexcept nogil:
    """Trace of the inverse of the projected information matrix; 0 on success."""
    cdef int n3 = 3 * K
    cdef int k2 = 2 * K
    cdef int i, j, p, c
    cdef double d, maxd, acc
    cdef cplx s

    # Cholesky of G = Q[:K, :K] (Hermitian), L lower with G = L L^H.
    maxd = 0.0
    for i in range(K):
        if Q[i * n3 + i].real > maxd:
            maxd = Q[i * n3 + i].real
    for j in range(K):
        d = Q[j * n3 + j].real
        for p in range(j):
            d -= _abs2(L[j * K + p])
        if not (d > tol * maxd):
            return 1
        L[j * K + j] = sqrt(d)
        for i in range(j + 1, K):
            s = Q[i * n3 + j]
            for p in range(j):
                s -= L[i * K + p] * _conj(L[j * K + p])
            L[i * K + j] = s / L[j * K + j].real
        for i in range(j):
            L[i * K + j] = 0.0

    # W = L^{-1} B with B = Q[:K, K:].
    for c in range(k2):
        for i in range(K):
            s = Q[i * n3 + K + c]
            for p in range(i):
                s -= L[i * K + p] * W[p * k2 + c]
            W[i * k2 + c] = s / L[i * K + i].real

    # H = Re{rs2 .* (D^H D - W^H W)}, lower triangle.
    maxd = 0.0
    for i in range(k2):
        for j in range(i + 1):
            s = Q[(K + i) * n3 + K + j]
            for p in range(K):
                s -= _conj(W[p * k2 + i]) * W[p * k2 + j]
            H[i * k2 + j] = (rs2[i * k2 + j] * s).real
        if H[i * k2 + i] > maxd:
            maxd = H[i * k2 + i]

    # Real Cholesky of H.
    for j in range(k2):
        d = H[j * k2 + j]
        for p in range(j):
            d -= Lh[j * k2 + p] * Lh[j * k2 + p]
        if not (d > tol * maxd):
            return 2
        Lh[j * k2 + j] = sqrt(d)
        for i in range(j + 1, k2):
            acc = H[i * k2 + j]
            for p in range(j):
                acc -= Lh[i * k2 + p] * Lh[j * k2 + p]
            Lh[i * k2 + j] = acc / Lh[j * k2 + j]

    # tr(H^{-1}) = ||Lh^{-1}||_F^2, one column at a time.
    acc = 0.0
    for c in range(k2):
        z[c] = 1.0 / Lh[c * k2 + c]
        acc += z[c] * z[c]
        for i in range(c + 1, k2):
            d = 0.0
            for p in range(c, i):
                d -= Lh[i * k2 + p] * z[p]
            z[i] = d / Lh[i * k2 + i]
            acc += z[i] * z[i]
    out[0] = acc
    return 0


def gram_matrices(const double[::1] x, const double[::1] y, const double[:, ::1] u,
                  const double[:, ::1] v, double wavenumber):
    cdef Py_ssize_t M = u.shape[0]
    cdef int K = <int>u.shape[1]
    cdef int n3 = 3 * K
    cdef Py_ssize_t N = x.shape[0]
    Q_arr = np.zeros((M, n3, n3), dtype=np.complex128)
    cdef cplx[:, :, ::1] Q = Q_arr
    e_arr = np.empty(n3, dtype=np.complex128)
    cdef cplx[::1] e = e_arr
    cdef Py_ssize_t m, n
    if M == 0:
        return Q_arr
    with nogil:
        for m in range(M):
            for n in range(N):
                _fill_row(&e[0], x[n], y[n], &u[m, 0], &v[m, 0], K, wavenumber)
                _add_outer(&Q[m, 0, 0], &e[0], n3)
    return Q_arr


def antenna_gram(double px, double py, const double[:, ::1] u, const double[:, ::1] v,
                 double wavenumber):
    cdef Py_ssize_t M = u.shape[0]
    cdef int K = <int>u.shape[1]
    cdef int n3 = 3 * K
    Q_arr = np.zeros((M, n3, n3), dtype=np.complex128)
    cdef cplx[:, :, ::1] Q = Q_arr
    e_arr = np.empty(n3, dtype=np.complex128)
    cdef cplx[::1] e = e_arr
    cdef Py_ssize_t m
    if M == 0:
        return Q_arr
    with nogil:
        for m in range(M):
            _fill_row(&e[0], px, py, &u[m, 0], &v[m, 0], K, wavenumber)
            _add_outer(&Q[m, 0, 0], &e[0], n3)
    return Q_arr


cdef _scratch(int K):
    return (np.empty(K * K, dtype=np.complex128), np.empty(2 * K * K, dtype=np.complex128),
            np.empty(4 * K * K), np.zeros(4 * K * K), np.empty(2 * K))


def traces_from_gram(const cplx[:, :, ::1] Q, const cplx[:, :, ::1] rs2, double noise_power,
                     double pivot_tol=1e-12):
    cdef Py_ssize_t M = Q.shape[0]
    cdef int K = <int>(Q.shape[1] // 3)
    out_arr = np.empty(M)
    ok_arr = np.ones(M, dtype=bool)
    cdef double[::1] out = out_arr
    cdef unsigned char[::1] ok = ok_arr.view(np.uint8)
    Lb, Wb, Hb, Lhb, zb = _scratch(K)
    cdef cplx[::1] L = Lb
    cdef cplx[::1] W = Wb
    cdef double[::1] H = Hb
    cdef double[::1] Lh = Lhb
    cdef double[::1] z = zb
    cdef Py_ssize_t m
    cdef double tr
    if M == 0:
        return out_arr, ok_arr
    with nogil:
        for m in range(M):
            if _trace_one(&Q[m, 0, 0], &rs2[m, 0, 0], K, pivot_tol, &L[0], &W[0], &H[0],
                          &Lh[0], &z[0], &tr) == 0:
                out[m] = 0.5 * noise_power * tr
            else:
                out[m] = NAN
                ok[m] = 0
    return out_arr, ok_arr


def candidate_traces(const cplx[:, :, ::1] Q_rest, double px, double py,
                     const double[:, ::1] u, const double[:, ::1] v,
                     const cplx[:, :, ::1] rs2, double wavenumber, double noise_power,
                     double pivot_tol=1e-12):
    cdef Py_ssize_t M = Q_rest.shape[0]
    cdef int K = <int>(Q_rest.shape[1] // 3)
    cdef int n3 = 3 * K
    out_arr = np.empty(M)
    ok_arr = np.ones(M, dtype=bool)
    cdef double[::1] out = out_arr
    cdef unsigned char[::1] ok = ok_arr.view(np.uint8)
    Lb, Wb, Hb, Lhb, zb = _scratch(K)
    cdef cplx[::1] L = Lb
    cdef cplx[::1] W = Wb
    cdef double[::1] H = Hb
    cdef double[::1] Lh = Lhb
    cdef double[::1] z = zb
    qs_arr = np.empty(n3 * n3, dtype=np.complex128)
    cdef cplx[::1] qs = qs_arr
    e_arr = np.empty(n3, dtype=np.complex128)
    cdef cplx[::1] e = e_arr
    cdef Py_ssize_t m
    cdef int i
    cdef double tr
    if M == 0:
        return out_arr, ok_arr
    with nogil:
        for m in range(M):
            for i in range(n3 * n3):
                qs[i] = (&Q_rest[m, 0, 0])[i]
            _fill_row(&e[0], px, py, &u[m, 0], &v[m, 0], K, wavenumber)
            _add_outer(&qs[0], &e[0], n3)
            if _trace_one(&qs[0], &rs2[m, 0, 0], K, pivot_tol, &L[0], &W[0], &H[0],
                          &Lh[0], &z[0], &tr) == 0:
                out[m] = 0.5 * noise_power * tr
            else:
                out[m] = NAN
                ok[m] = 0
    return out_arr, ok_arr
