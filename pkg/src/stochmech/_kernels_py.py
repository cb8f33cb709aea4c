"""Pure numpy/scipy twins of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy.linalg import solve_banded

BACKEND = "python"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_LO = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def philox4x32(c0, c1, c2, c3, key0, key1):
    """Philox4x32-10 block function, vectorized over counters."""
    x0 = np.asarray(c0, dtype=np.uint64)
    x1 = np.asarray(c1, dtype=np.uint64)
    x2 = np.asarray(c2, dtype=np.uint64)
    x3 = np.asarray(c3, dtype=np.uint64)
    k0 = int(key0) & 0xFFFFFFFF
    k1 = int(key1) & 0xFFFFFFFF
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * x0
        p1 = _M1 * x2
        x0, x1, x2, x3 = ((p1 >> _SHIFT) ^ x1 ^ np.uint64(k0),
                          p1 & _LO,
                          (p0 >> _SHIFT) ^ x3 ^ np.uint64(k1),
                          p0 & _LO)
    return np.stack([x0, x1, x2, x3], axis=1).astype(np.uint32)


def tridiag_factor(lower, diag, upper):
    """Banded storage for ``solve_banded``; the factor is opaque to callers."""
    diag = np.asarray(diag, dtype=np.complex128)
    n = diag.shape[0]
    ab = np.zeros((3, n), dtype=np.complex128)
    ab[0, 1:] = np.asarray(upper, dtype=np.complex128)[:-1]
    ab[1] = diag
    ab[2, :-1] = np.asarray(lower, dtype=np.complex128)[1:]
    if np.any(diag == 0) and n == 1:
        raise ZeroDivisionError("singular tridiagonal system")
    return ab


def tridiag_solve(factor, rhs):
    try:
        return solve_banded((1, 1), factor, np.asarray(rhs, dtype=np.complex128),
                            check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ZeroDivisionError("singular tridiagonal system") from exc


def advance_walkers(pos, xp, fp, kicks, dt, cap, lo, hi, periodic):
    drift = np.interp(pos, xp, fp)
    n_capped = int(np.count_nonzero(np.abs(drift) > cap))
    drift = np.clip(drift, -cap, cap)
    x = pos + drift * dt + kicks
    if periodic:
        span = hi - lo
        x = x - span * np.floor((x - lo) / span)
        x[x >= hi] = lo
    else:
        x = np.where(x < lo, 2.0 * lo - x, x)
        x = np.where(x > hi, 2.0 * hi - x, x)
        x = np.maximum(x, lo)
    return x, n_capped
