"""Backend selection for the hot interaction kernel.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. ``KENKF_BACKEND=python`` forces the fallback.
``KENKF_THREADS`` caps the number of OpenMP threads of the compiled kernel.
"""
from __future__ import annotations

import os

from . import _kernels_py

python_backend = _kernels_py

try:
    from . import _kernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if os.environ.get("KENKF_BACKEND", "").lower() == "python" or compiled_backend is None:
    backend = _kernels_py
    BACKEND_NAME = "python"
else:
    backend = compiled_backend
    BACKEND_NAME = "compiled"


def num_threads() -> int:
    """Worker count: all cores unless ``KENKF_THREADS`` sets a lower cap."""
    cores = os.cpu_count() or 1
    try:
        cap = int(os.environ.get("KENKF_THREADS", cores))
    except ValueError:
        return cores
    return max(1, min(cores, cap))


def subsampled_drift(A, B, W, M, key, backend_module=None):
    mod = backend_module or backend
    return mod.subsampled_drift(A, B, W, int(M), int(key), num_threads())


def subsample_indices(J, M, key, particle, backend_module=None):
    mod = backend_module or backend
    return mod.subsample_indices(int(J), int(M), int(key), int(particle))
