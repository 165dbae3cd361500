# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-particle interaction kernel."""
import numpy as np

from cython.parallel cimport parallel, prange
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free

cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = z + <uint64_t>0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def subsampled_drift(const double[:, ::1] A, const double[:, ::1] B,
                     const double[:, ::1] W, Py_ssize_t M, uint64_t key,
                     int num_threads=1):
    """For every particle j draw M distinct indices S_j and return

        out[j] = (1/M) sum_{k in S_j} (A[k] - mean_S A) * ((B[k] - mean_S B) . W[j])
    """
    cdef Py_ssize_t J = A.shape[0]
    cdef Py_ssize_t da = A.shape[1]
    cdef Py_ssize_t db = B.shape[1]
    if B.shape[0] != J or W.shape[0] != J or W.shape[1] != db:
        raise ValueError("inconsistent kernel input shapes")
    if M < 1 or M > J:
        raise ValueError("subsample size must satisfy 1 <= M <= J")
    out_arr = np.zeros((J, da), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t j, i, k, c, r, tmp, t
    cdef int64_t *idx
    cdef int64_t *swaps
    cdef double *abar
    cdef double *bbar
    cdef double coef, invM = 1.0 / M
    cdef uint64_t pk
    cdef int nt = num_threads if num_threads > 0 else 1

    with nogil, parallel(num_threads=nt):
        idx = <int64_t *> malloc(J * sizeof(int64_t))
        swaps = <int64_t *> malloc(M * sizeof(int64_t))
        abar = <double *> malloc(da * sizeof(double))
        bbar = <double *> malloc(db * sizeof(double))
        for t in range(J):
            idx[t] = t
        for j in prange(J, schedule="static"):
            pk = _mix(key ^ <uint64_t>j)
            # partial Fisher-Yates; undone below so idx stays the identity
            for i in range(M):
                r = i + <Py_ssize_t>((_mix(pk + <uint64_t>i) >> 11) * TWO_M53 * (J - i))
                swaps[i] = r
                tmp = idx[i]
                idx[i] = idx[r]
                idx[r] = tmp
            for c in range(da):
                abar[c] = 0.0
            for c in range(db):
                bbar[c] = 0.0
            for i in range(M):
                k = idx[i]
                for c in range(da):
                    abar[c] = abar[c] + A[k, c]
                for c in range(db):
                    bbar[c] = bbar[c] + B[k, c]
            for c in range(da):
                abar[c] = abar[c] * invM
            for c in range(db):
                bbar[c] = bbar[c] * invM
            for i in range(M):
                k = idx[i]
                coef = 0.0
                for c in range(db):
                    coef = coef + (B[k, c] - bbar[c]) * W[j, c]
                coef = coef * invM
                for c in range(da):
                    out[j, c] = out[j, c] + coef * (A[k, c] - abar[c])
            for i in range(M - 1, -1, -1):
                r = swaps[i]
                tmp = idx[i]
                idx[i] = idx[r]
                idx[r] = tmp
        free(idx)
        free(swaps)
        free(abar)
        free(bbar)
    return out_arr


def subsample_indices(Py_ssize_t J, Py_ssize_t M, uint64_t key, Py_ssize_t particle):
    """Indices the kernel selects for one particle (for testing)."""
    cdef Py_ssize_t i, r, tmp
    cdef uint64_t pk = _mix(key ^ <uint64_t>particle)
    idx = np.arange(J, dtype=np.int64)
    cdef int64_t[::1] v = idx
    for i in range(M):
        r = i + <Py_ssize_t>((_mix(pk + <uint64_t>i) >> 11) * TWO_M53 * (J - i))
        tmp = v[i]
        v[i] = v[r]
        v[r] = tmp
    return idx[:M].copy()
