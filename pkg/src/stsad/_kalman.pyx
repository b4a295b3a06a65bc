# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Kalman filter recursion for time-invariant univariate models.

The transition matrix is converted to a compressed sparse row layout on
entry, so ``T P T'`` costs O(nnz(T) * m) instead of O(m^3); structural
models are block diagonal with very sparse blocks.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, fabs, isfinite

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


def filter_loop(
    const double[::1] y,
    const unsigned char[::1] observed,
    const double[::1] Z,
    const double[:, ::1] T,
    const double[::1] c,
    double d,
    double H,
    const double[:, ::1] RQR,
    const double[::1] a1,
    const double[:, ::1] P1,
    Py_ssize_t n_burn,
    bint store_states,
    bint store_cov,
    double ss_tol,
):
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t m = Z.shape[0]
    cdef Py_ssize_t i, j, k, p, t
    cdef Py_ssize_t n_counted = 0, n_seen = 0, fail_step = -1
    cdef double F = 0.0, invF, v, acc, loglik = 0.0, diff, scale, tmp, tmp2
    cdef bint converged = False

    # CSR layout of T
    cdef Py_ssize_t nnz = 0
    for i in range(m):
        for j in range(m):
            if T[i, j] != 0.0:
                nnz += 1
    cdef cnp.intp_t[::1] rowptr = np.zeros(m + 1, dtype=np.intp)
    cdef cnp.intp_t[::1] colidx = np.zeros(max(nnz, 1), dtype=np.intp)
    cdef double[::1] vals = np.zeros(max(nnz, 1))
    p = 0
    for i in range(m):
        rowptr[i] = p
        for j in range(m):
            if T[i, j] != 0.0:
                colidx[p] = j
                vals[p] = T[i, j]
                p += 1
    rowptr[m] = p

    cdef Py_ssize_t nz_z = 0
    for i in range(m):
        if Z[i] != 0.0:
            nz_z += 1
    cdef cnp.intp_t[::1] zidx = np.zeros(max(nz_z, 1), dtype=np.intp)
    p = 0
    for i in range(m):
        if Z[i] != 0.0:
            zidx[p] = i
            p += 1

    cdef double[::1] a = np.array(a1, dtype=np.float64)
    cdef double[:, ::1] P = np.array(P1, dtype=np.float64)
    cdef double[::1] af = np.zeros(m)
    cdef double[:, ::1] Pf = np.zeros((m, m))
    cdef double[:, ::1] TP = np.zeros((m, m))
    cdef double[::1] PZ = np.zeros(m)
    cdef double[::1] K = np.zeros(m)

    pred_mean_arr = np.empty(n)
    pred_var_arr = np.empty(n)
    cdef double[::1] pred_mean = pred_mean_arr
    cdef double[::1] pred_var = pred_var_arr
    cdef Py_ssize_t ns = n if store_states else 0
    cdef Py_ssize_t nc = n if store_cov else 0
    pred_state_arr = np.empty((ns, m))
    filt_state_arr = np.empty((ns, m))
    filt_cov_arr = np.empty((nc, m, m))
    cdef double[:, ::1] pred_state = pred_state_arr
    cdef double[:, ::1] filt_state = filt_state_arr
    cdef double[:, :, ::1] filt_cov = filt_cov_arr

    for t in range(n):
        acc = d
        for p in range(nz_z):
            k = zidx[p]
            acc += Z[k] * a[k]
        pred_mean[t] = acc

        if not converged:
            for i in range(m):
                tmp = 0.0
                for p in range(nz_z):
                    k = zidx[p]
                    tmp += P[i, k] * Z[k]
                PZ[i] = tmp
            F = H
            for p in range(nz_z):
                k = zidx[p]
                F += Z[k] * PZ[k]
        pred_var[t] = F
        if not (F > 0.0) or not isfinite(F):
            fail_step = t
            break
        if store_states:
            for i in range(m):
                pred_state[t, i] = a[i]

        if observed[t]:
            v = y[t] - acc
            if not converged:
                invF = 1.0 / F
                for i in range(m):
                    K[i] = PZ[i] * invF
            for i in range(m):
                af[i] = a[i] + K[i] * v
            if not converged:
                for i in range(m):
                    tmp2 = K[i]
                    for j in range(i, m):
                        tmp = P[i, j] - tmp2 * PZ[j]
                        Pf[i, j] = tmp
                        Pf[j, i] = tmp
            n_seen += 1
            if n_seen > n_burn:
                loglik += -0.5 * (LOG_2PI + log(F) + v * v / F)
                n_counted += 1
        else:
            converged = False
            for i in range(m):
                af[i] = a[i]
                for j in range(m):
                    Pf[i, j] = P[i, j]

        if store_states:
            for i in range(m):
                filt_state[t, i] = af[i]
        if store_cov:
            for i in range(m):
                for j in range(m):
                    filt_cov[t, i, j] = Pf[i, j]

        # a <- T af + c
        for i in range(m):
            tmp = c[i]
            for p in range(rowptr[i], rowptr[i + 1]):
                tmp += vals[p] * af[colidx[p]]
            a[i] = tmp

        if not converged:
            # TP = T Pf
            for i in range(m):
                if rowptr[i] == rowptr[i + 1]:
                    for j in range(m):
                        TP[i, j] = 0.0
                    continue
                p = rowptr[i]
                k = colidx[p]
                tmp = vals[p]
                for j in range(m):
                    TP[i, j] = tmp * Pf[k, j]
                for p in range(rowptr[i] + 1, rowptr[i + 1]):
                    k = colidx[p]
                    tmp = vals[p]
                    for j in range(m):
                        TP[i, j] += tmp * Pf[k, j]
            # P <- TP T' + RQR in place (upper triangle read, mirrored)
            diff = 0.0
            scale = 0.0
            for i in range(m):
                for j in range(i, m):
                    tmp = RQR[i, j]
                    for p in range(rowptr[j], rowptr[j + 1]):
                        tmp += TP[i, colidx[p]] * vals[p]
                    if ss_tol > 0.0:
                        if fabs(tmp - P[i, j]) > diff:
                            diff = fabs(tmp - P[i, j])
                        if fabs(tmp) > scale:
                            scale = fabs(tmp)
                    P[i, j] = tmp
                    P[j, i] = tmp
            if observed[t] and ss_tol > 0.0 and diff <= ss_tol * scale:
                converged = True

    return (
        pred_mean_arr, pred_var_arr, pred_state_arr, filt_state_arr,
        filt_cov_arr if store_cov else None,
        np.asarray(af).copy(), np.asarray(Pf).copy(),
        np.asarray(a).copy(), np.asarray(P).copy(),
        loglik, n_counted, fail_step,
    )
