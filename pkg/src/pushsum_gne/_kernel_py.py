"""Pure-numpy run loop for scalar quadratic games (fallback for ``_kernel``).

``run_scalar_quadratic`` advances ``T = len(alpha)`` synchronous rounds of
the push-sum primal-dual iteration and writes into preallocated arrays:

* ``X, Z, MU, SIG`` -- shape ``(T + 1, N)``, row 0 filled by the caller;
* ``MUH, SIGH`` -- mixed duals / trackers, shape ``(T, N)``;
* ``G`` -- constraint shares ``g_{i,t}(x_{i,t})``, shape ``(T + 1, N)``
  (row ``T`` is left to the caller).

``W`` has shape ``(K, N, N)`` and slot ``t`` uses ``W[t % K]``; ``coef`` has
shape ``(T, N, 6)`` or ``(1, N, 6)`` for frozen coefficients.  Returns
``None`` on success or ``(t, player, line)`` for the first non-finite value.
"""

import numpy as np


def run_scalar_quadratic(W, coef, xi, alpha, beta, gamma, lo, hi, kappa, p0, slope, cap_share, X, Z, MU, SIG, MUH, SIGH, G):
    T = alpha.shape[0]
    N = X.shape[1]
    K = W.shape[0]
    frozen = coef.shape[0] == 1
    agg_share = kappa / N * slope
    for t in range(T):
        Wt = W[t % K]
        C = coef[0 if frozen else t]
        Z[t + 1] = Wt @ Z[t]
        MUH[t] = Wt @ MU[t]
        SIGH[t] = Wt @ SIG[t]
        for line, arr in ((0, Z[t + 1]), (1, MUH[t]), (1, SIGH[t])):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                return (t, int(bad[0]), line)

        x = X[t]
        zn = Z[t + 1]
        mh = MUH[t]
        sh = SIGH[t]
        y = sh / zn
        p = C[:, 1] + 2.0 * C[:, 2] * x - p0 + slope * y + agg_share * x
        p = p + xi[t]
        gval = C[:, 3] + C[:, 4] * x + C[:, 5] * x * x - cap_share
        gjac = C[:, 4] + 2.0 * C[:, 5] * x
        G[t] = gval
        s = p + gjac * (mh / zn)
        xn = np.minimum(np.maximum(x - alpha[t] * s, lo), hi)
        mn = np.maximum(mh + gamma[t] * (gval - beta[t] * mh), 0.0)
        sn = sh + kappa * xn - kappa * x
        for line, arr in ((2, s), (3, xn), (4, mn), (5, sn)):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                return (t, int(bad[0]), line)
        X[t + 1] = xn
        MU[t + 1] = mn
        SIG[t + 1] = sn
    return None
