"""Rollout-kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``LQMFPG_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementation is used.  Both expose ``mkv_costs``,
``pop_costs`` and ``BACKEND``.
"""

import os

import numpy as np

from . import _kernels_py


def _load():
    if os.environ.get("LQMFPG_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py
    try:
        from . import _kernels_c
    except ImportError:
        return _kernels_py
    return _kernels_c


backend = _load()
BACKEND = backend.BACKEND


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def mkv_costs(Fy, Fz, Gy, Gz, codes, offsets, factors, y0_shift, gamma, T, keys,
              num_threads=1, impl=None):
    impl = impl or backend
    return impl.mkv_costs(
        _c(Fy), _c(Fz), _c(Gy), _c(Gz), np.ascontiguousarray(codes, dtype=np.int64),
        _c(offsets), _c(factors), _c(y0_shift), float(gamma), int(T),
        np.ascontiguousarray(keys, dtype=np.uint64), num_threads=int(num_threads),
    )


def pop_costs(A, Abar, B, Bbar, K, L, Qn, Qbar, R, Rbar, codes, offsets, factors, gamma, T,
              keys, num_threads=1, impl=None):
    impl = impl or backend
    return impl.pop_costs(
        _c(A), _c(Abar), _c(B), _c(Bbar), _c(K), _c(L), _c(Qn), _c(Qbar), _c(R), _c(Rbar),
        np.ascontiguousarray(codes, dtype=np.int64), _c(offsets), _c(factors), float(gamma),
        int(T), np.ascontiguousarray(keys, dtype=np.uint64), num_threads=int(num_threads),
    )


def get_backend(name=None):
    """Module for ``name`` in {"python", "cython"}; None gives the active one."""
    if name is None:
        return backend
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels_c

        return _kernels_c
    raise ValueError(f"unknown kernel backend {name!r}")
