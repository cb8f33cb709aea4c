# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Each function here has a twin in ``_kernels_py`` with the same signature;
``stochmech._backend`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint32_t, uint64_t, int64_t

cnp.import_array()

BACKEND = "compiled"

cdef uint32_t PHILOX_M0 = 0xD2511F53
cdef uint32_t PHILOX_M1 = 0xCD9E8D57
cdef uint32_t PHILOX_W0 = 0x9E3779B9
cdef uint32_t PHILOX_W1 = 0xBB67AE85


def philox4x32(uint32_t[::1] c0, uint32_t[::1] c1, uint32_t[::1] c2,
               uint32_t[::1] c3, uint32_t key0, uint32_t key1):
    """Philox4x32-10 block function over vectors of counters.

    Returns an ``(n, 4)`` uint32 array of random words.
    """
    cdef Py_ssize_t n = c0.shape[0]
    out = np.empty((n, 4), dtype=np.uint32)
    cdef uint32_t[:, ::1] o = out
    cdef Py_ssize_t i
    cdef int r
    cdef uint32_t x0, x1, x2, x3, k0, k1, hi0, lo0, hi1, lo1
    cdef uint64_t p0, p1
    with nogil:
        for i in range(n):
            x0 = c0[i]
            x1 = c1[i]
            x2 = c2[i]
            x3 = c3[i]
            k0 = key0
            k1 = key1
            for r in range(10):
                if r > 0:
                    k0 = k0 + PHILOX_W0
                    k1 = k1 + PHILOX_W1
                p0 = <uint64_t>PHILOX_M0 * <uint64_t>x0
                p1 = <uint64_t>PHILOX_M1 * <uint64_t>x2
                hi0 = <uint32_t>(p0 >> 32)
                lo0 = <uint32_t>p0
                hi1 = <uint32_t>(p1 >> 32)
                lo1 = <uint32_t>p1
                x0 = hi1 ^ x1 ^ k0
                x1 = lo1
                x2 = hi0 ^ x3 ^ k1
                x3 = lo0
            o[i, 0] = x0
            o[i, 1] = x1
            o[i, 2] = x2
            o[i, 3] = x3
    return out


def tridiag_factor(double complex[::1] lower, double complex[::1] diag,
                   double complex[::1] upper):
    """LU-factor a tridiagonal matrix for repeated solves.

    ``lower[0]`` and ``upper[-1]`` are ignored.  The returned factor is
    opaque; pass it to ``tridiag_solve``.
    """
    cdef Py_ssize_t n = diag.shape[0]
    cprime_arr = np.empty(n, dtype=np.complex128)
    winv_arr = np.empty(n, dtype=np.complex128)
    cdef double complex[::1] cp = cprime_arr
    cdef double complex[::1] w = winv_arr
    cdef double complex piv
    cdef Py_ssize_t i
    piv = diag[0]
    if piv == 0:
        raise ZeroDivisionError("singular tridiagonal system")
    w[0] = 1.0 / piv
    cp[0] = upper[0] * w[0]
    for i in range(1, n):
        piv = diag[i] - lower[i] * cp[i - 1]
        if piv == 0:
            raise ZeroDivisionError("singular tridiagonal system")
        w[i] = 1.0 / piv
        cp[i] = upper[i] * w[i] if i < n - 1 else 0.0
    return (np.array(lower, dtype=np.complex128), cprime_arr, winv_arr)


def tridiag_solve(factor, rhs):
    """Forward/back substitution with a factor from ``tridiag_factor``."""
    lower, cprime, winv = factor
    return _tridiag_solve(lower, cprime, winv,
                          np.ascontiguousarray(rhs, dtype=np.complex128))


cdef _tridiag_solve(double complex[::1] lower, double complex[::1] cprime,
                    double complex[::1] winv, double complex[::1] rhs):
    cdef Py_ssize_t n = rhs.shape[0]
    out = np.empty(n, dtype=np.complex128)
    cdef double complex[::1] x = out
    cdef Py_ssize_t i
    with nogil:
        x[0] = rhs[0] * winv[0]
        for i in range(1, n):
            x[i] = (rhs[i] - lower[i] * x[i - 1]) * winv[i]
        for i in range(n - 2, -1, -1):
            x[i] = x[i] - cprime[i] * x[i + 1]
    return out


def advance_walkers(double[::1] pos, double[::1] xp, double[::1] fp,
                    double[::1] kicks, double dt, double cap,
                    double lo, double hi, bint periodic):
    """One Euler-Maruyama update with linearly interpolated drift.

    ``xp`` must be increasing and cover ``[lo, hi]`` (callers pad periodic
    tables with wrapped copies).  Drift is clipped to ``[-cap, cap]``.
    Returns ``(new_positions, n_capped)``.
    """
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t m = xp.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, a, b, mid
    cdef double x, drift, slope, span
    cdef int64_t capped = 0
    span = hi - lo
    with nogil:
        for i in range(n):
            x = pos[i]
            if x <= xp[0]:
                drift = fp[0]
            elif x >= xp[m - 1]:
                drift = fp[m - 1]
            else:
                a = 0
                b = m - 1
                while b - a > 1:
                    mid = (a + b) >> 1
                    if xp[mid] <= x:
                        a = mid
                    else:
                        b = mid
                slope = (fp[a + 1] - fp[a]) / (xp[a + 1] - xp[a])
                drift = slope * (x - xp[a]) + fp[a]
            if drift > cap:
                drift = cap
                capped += 1
            elif drift < -cap:
                drift = -cap
                capped += 1
            x = x + drift * dt + kicks[i]
            if periodic:
                x = x - span * _floor((x - lo) / span)
                if x >= hi:
                    x = lo
            else:
                if x < lo:
                    x = 2.0 * lo - x
                if x > hi:
                    x = 2.0 * hi - x
                if x < lo:
                    x = lo
            o[i] = x
    return out, int(capped)


cdef inline double _floor(double v) nogil:
    cdef double t = <double>(<int64_t>v)
    if t > v:
        t -= 1.0
    return t
