# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled run loop for scalar quadratic aggregative games.

Mirrors ``_kernel_py.run_scalar_quadratic`` line for line; see that module
for the argument contract.
"""

from libc.math cimport isfinite


cdef inline int _finite_row(const double[::1] v, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        if not isfinite(v[i]):
            return <int>i
    return -1


def run_scalar_quadratic(
    const double[:, :, ::1] W,
    const double[:, :, ::1] coef,
    const double[:, ::1] xi,
    const double[::1] alpha,
    const double[::1] beta,
    const double[::1] gamma,
    const double[::1] lo,
    const double[::1] hi,
    double kappa,
    double p0,
    double slope,
    double cap_share,
    double[:, ::1] X,
    double[:, ::1] Z,
    double[:, ::1] MU,
    double[:, ::1] SIG,
    double[:, ::1] MUH,
    double[:, ::1] SIGH,
    double[:, ::1] G,
):
    cdef Py_ssize_t T = alpha.shape[0]
    cdef Py_ssize_t N = X.shape[1]
    cdef Py_ssize_t K = W.shape[0]
    cdef bint frozen = coef.shape[0] == 1
    cdef Py_ssize_t t, i, j, k, ct
    cdef double zn, mh, sh, x, y, p, gval, gjac, s, xn, mn, al, be, ga
    cdef double agg_share = kappa / <double>N * slope
    cdef int bad

    for t in range(T):
        k = t % K
        ct = 0 if frozen else t
        al = alpha[t]
        be = beta[t]
        ga = gamma[t]
        for i in range(N):
            zn = 0.0
            mh = 0.0
            sh = 0.0
            for j in range(N):
                zn = zn + W[k, i, j] * Z[t, j]
                mh = mh + W[k, i, j] * MU[t, j]
                sh = sh + W[k, i, j] * SIG[t, j]
            Z[t + 1, i] = zn
            MUH[t, i] = mh
            SIGH[t, i] = sh
        bad = _finite_row(Z[t + 1], N)
        if bad >= 0:
            return (t, bad, 0)
        bad = _finite_row(MUH[t], N)
        if bad < 0:
            bad = _finite_row(SIGH[t], N)
        if bad >= 0:
            return (t, bad, 1)

        for i in range(N):
            x = X[t, i]
            zn = Z[t + 1, i]
            mh = MUH[t, i]
            sh = SIGH[t, i]
            y = sh / zn
            p = coef[ct, i, 1] + 2.0 * coef[ct, i, 2] * x - p0 + slope * y + agg_share * x
            p = p + xi[t, i]
            gval = coef[ct, i, 3] + coef[ct, i, 4] * x + coef[ct, i, 5] * x * x - cap_share
            gjac = coef[ct, i, 4] + 2.0 * coef[ct, i, 5] * x
            G[t, i] = gval
            s = p + gjac * (mh / zn)
            if not isfinite(s):
                return (t, i, 2)
            xn = x - al * s
            if xn < lo[i]:
                xn = lo[i]
            elif xn > hi[i]:
                xn = hi[i]
            if not isfinite(xn):
                return (t, i, 3)
            mn = mh + ga * (gval - be * mh)
            if mn < 0.0:
                mn = 0.0
            if not isfinite(mn):
                return (t, i, 4)
            X[t + 1, i] = xn
            MU[t + 1, i] = mn
            SIG[t + 1, i] = sh + kappa * xn - kappa * x
            if not isfinite(SIG[t + 1, i]):
                return (t, i, 5)
    return None
