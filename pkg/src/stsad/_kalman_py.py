"""Pure NumPy implementation of the Kalman recursion.

Mirrors ``_kalman.filter_loop`` step for step (including the steady-state
shortcut) so that both backends agree to rounding error.
"""

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def filter_loop(y, observed, Z, T, c, d, H, RQR, a1, P1, n_burn,
                store_states, store_cov, ss_tol):
    n = y.shape[0]
    m = Z.shape[0]
    a = np.array(a1, dtype=float)
    P = np.array(P1, dtype=float)
    af = np.zeros(m)
    Pf = np.zeros((m, m))
    K = np.zeros(m)
    F = 0.0
    converged = False
    loglik = 0.0
    n_seen = n_counted = 0
    fail_step = -1

    pred_mean = np.empty(n)
    pred_var = np.empty(n)
    ns = n if store_states else 0
    pred_state = np.empty((ns, m))
    filt_state = np.empty((ns, m))
    filt_cov = np.empty((n, m, m)) if store_cov else None

    for t in range(n):
        mean = d + Z @ a
        pred_mean[t] = mean
        if not converged:
            PZ = P @ Z
            F = H + Z @ PZ
        pred_var[t] = F
        if not (F > 0.0) or not math.isfinite(F):
            fail_step = t
            break
        if store_states:
            pred_state[t] = a

        if observed[t]:
            v = y[t] - mean
            if not converged:
                K = PZ / F
            af = a + K * v
            if not converged:
                Pf = P - np.outer(PZ, PZ) / F
                Pf = np.triu(Pf) + np.triu(Pf, 1).T
            n_seen += 1
            if n_seen > n_burn:
                loglik += -0.5 * (LOG_2PI + math.log(F) + v * v / F)
                n_counted += 1
        else:
            converged = False
            af = a.copy()
            Pf = P.copy()

        if store_states:
            filt_state[t] = af
        if store_cov:
            filt_cov[t] = Pf

        a = T @ af + c
        if not converged:
            Pn = T @ Pf @ T.T + RQR
            Pn = np.triu(Pn) + np.triu(Pn, 1).T
            diff = np.max(np.abs(Pn - P)) if m else 0.0
            scale = np.max(np.abs(Pn)) if m else 0.0
            P = Pn
            if observed[t] and ss_tol > 0.0 and diff <= ss_tol * scale:
                converged = True

    return (
        pred_mean, pred_var, pred_state, filt_state, filt_cov,
        af.copy(), Pf.copy(), a.copy(), P.copy(),
        loglik, n_counted, fail_step,
    )
