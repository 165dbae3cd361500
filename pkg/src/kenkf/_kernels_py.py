"""Pure-Python/numpy version of the interaction kernel.

Draws exactly the same subsamples as the compiled kernel; only the
floating-point summation order of the moments may differ.
"""
from __future__ import annotations

import numpy as np

from ._counter_rng import particle_key, uniform


def subsample_indices(J: int, M: int, key: int, particle: int) -> np.ndarray:
    pk = particle_key(key, particle)
    moved = {}
    out = np.empty(M, dtype=np.int64)
    for i in range(M):
        r = i + int(uniform(pk, i) * (J - i))
        vi = moved.get(i, i)
        vr = moved.get(r, r)
        out[i] = vr
        moved[r] = vi
    return out


def subsampled_drift(A, B, W, M, key, num_threads=1):
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    W = np.ascontiguousarray(W, dtype=float)
    J = A.shape[0]
    if B.shape[0] != J or W.shape != (J, B.shape[1]):
        raise ValueError("inconsistent kernel input shapes")
    if M < 1 or M > J:
        raise ValueError("subsample size must satisfy 1 <= M <= J")
    out = np.empty_like(A)
    for j in range(J):
        sel = subsample_indices(J, M, key, j)
        dA = A[sel] - A[sel].mean(axis=0)
        dB = B[sel] - B[sel].mean(axis=0)
        out[j] = (dB @ W[j]) @ dA / M
    return out
