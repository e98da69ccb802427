# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the interaction and transport kernels."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport atan2, fabs, floor, fmod, M_PI

cnp.import_array()

NAME = "cython"

cdef double TWO_PI = 2.0 * M_PI
cdef double FOUR_OVER_PI = 4.0 / M_PI
cdef double NORM_FLOOR2 = 1e-18
cdef double SNAP = 1e-12


cdef inline double _speed(double rho) noexcept nogil:
    cdef double s = (rho - 0.2) / 0.8
    if s <= 0.0:
        return 1.0
    if s >= 1.0:
        return 0.0
    return 1.0 - s * s * (3.0 - 2.0 * s)


cdef inline double _pymod(double a, double m) noexcept nogil:
    return a - floor(a / m) * m


cdef void _cell_rates(const double[:, ::1] F, const long[:, ::1] C, const double[::1] eps,
                      const double[::1] ux, const double[::1] uy, const double[::1] ang,
                      double[:, ::1] b, double[:, ::1] db, int want_db, Py_ssize_t c,
                      int nd) noexcept nogil:
    cdef Py_ssize_t h, k, i, hit
    cdef long ch
    cdef double e = eps[c]
    cdef double wx, wy, wpx, wpy, n2, theta, rate, ff, diff, d, Bv, sgn
    for h in range(nd):
        ch = C[c, h]
        if F[c, h] == 0.0:
            continue
        for k in range(nd):
            ff = F[c, h] * F[c, k]
            if ff == 0.0:
                continue
            wx = e * ux[k] + (1.0 - e) * ux[ch]
            wy = e * uy[k] + (1.0 - e) * uy[ch]
            wpx = ux[k] - ux[ch]
            wpy = uy[k] - uy[ch]
            n2 = wx * wx + wy * wy
            if n2 < NORM_FLOOR2:
                wx = ux[ch]
                wy = uy[ch]
                rate = 0.0
            else:
                rate = (wx * wpy - wy * wpx) / n2
            theta = _pymod(atan2(wy, wx), TWO_PI)
            if theta >= TWO_PI:
                theta = 0.0
            hit = -1
            for i in range(nd):
                if fabs(_pymod(theta - ang[i] + M_PI, TWO_PI) - M_PI) < SNAP:
                    hit = i
                    break
            if hit >= 0:
                b[c, hit] += ff
                continue
            for i in range(nd):
                diff = _pymod(theta - ang[i] + M_PI, TWO_PI) - M_PI
                d = fabs(diff)
                Bv = 1.0 - FOUR_OVER_PI * d
                if Bv > 0.0:
                    b[c, i] += Bv * ff
                    if want_db:
                        sgn = 1.0 if diff > 0.0 else (-1.0 if diff < 0.0 else 0.0)
                        db[c, i] += -FOUR_OVER_PI * sgn * rate * ff


def interaction_rates(F, C, eps, directions, bint want_db=True, int threads=1):
    """Fused quadratic gains ``b`` and stress derivatives ``db`` per cell."""
    cdef const double[:, ::1] Fv = np.ascontiguousarray(F, dtype=np.float64)
    cdef const long[:, ::1] Cv = np.ascontiguousarray(C, dtype=np.int_)
    cdef const double[::1] ev = np.ascontiguousarray(eps, dtype=np.float64)
    u = directions.unit_vectors
    cdef const double[::1] ux = np.ascontiguousarray(u[:, 0])
    cdef const double[::1] uy = np.ascontiguousarray(u[:, 1])
    cdef const double[::1] ang = np.ascontiguousarray(directions.angles, dtype=np.float64)
    cdef Py_ssize_t n = Fv.shape[0]
    cdef int nd = Fv.shape[1]
    b_arr = np.zeros((n, nd))
    db_arr = np.zeros((n, nd))
    cdef double[:, ::1] b = b_arr
    cdef double[:, ::1] db = db_arr
    cdef Py_ssize_t c
    cdef int wd = 1 if want_db else 0
    if threads > 1:
        for c in prange(n, nogil=True, num_threads=threads, schedule="static"):
            _cell_rates(Fv, Cv, ev, ux, uy, ang, b, db, wd, c, nd)
    else:
        with nogil:
            for c in range(n):
                _cell_rates(Fv, Cv, ev, ux, uy, ang, b, db, wd, c, nd)
    return b_arr, (db_arr if want_db else None)


def link_transport(f, rho, src, dst, dirn, rate, is_sink, double dt):
    """Donor-cell transport along lattice links with a receiver capacity limit."""
    cdef const double[:, ::1] fv = np.ascontiguousarray(f, dtype=np.float64)
    cdef const double[::1] rv = np.ascontiguousarray(rho, dtype=np.float64)
    cdef const long[::1] sv = np.ascontiguousarray(src, dtype=np.int_)
    cdef const long[::1] dv = np.ascontiguousarray(dst, dtype=np.int_)
    cdef const long[::1] iv = np.ascontiguousarray(dirn, dtype=np.int_)
    cdef const double[::1] wv = np.ascontiguousarray(rate, dtype=np.float64)
    cdef const cnp.npy_bool[::1] kv = np.ascontiguousarray(is_sink, dtype=np.bool_)
    cdef Py_ssize_t nd = fv.shape[0]
    cdef Py_ssize_t P = fv.shape[1]
    cdef Py_ssize_t L = sv.shape[0]
    flux_arr = np.empty(L)
    inflow_arr = np.zeros(P)
    scale_arr = np.ones(P)
    out_arr = np.zeros((nd, P))
    inc_arr = np.zeros((nd, P))
    cdef double[::1] flux = flux_arr
    cdef double[::1] inflow = inflow_arr
    cdef double[::1] scale = scale_arr
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] inc = inc_arr
    cdef Py_ssize_t l, p, i
    cdef double room, total = 0.0
    with nogil:
        for l in range(L):
            flux[l] = dt * wv[l] * _speed(rv[dv[l]]) * fv[iv[l], sv[l]]
            if not kv[l]:
                inflow[dv[l]] += flux[l]
        for p in range(P):
            room = 1.0 - rv[p]
            if room < 0.0:
                room = 0.0
            if inflow[p] > room:
                scale[p] = room / inflow[p]
        for l in range(L):
            if not kv[l]:
                flux[l] = flux[l] * scale[dv[l]]
            out[iv[l], sv[l]] += flux[l]
            if kv[l]:
                total += flux[l]
            else:
                inc[iv[l], dv[l]] += flux[l]
    f_new = np.asarray(fv) - out_arr + inc_arr
    return f_new, total
