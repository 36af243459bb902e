"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time from ``ANOSOVFAM_BACKEND``
(``numba`` or ``numpy``). When unset, numba is used if it imports.
Both paths share one calling convention; the wrappers below coerce inputs
to contiguous float64 so the compiled path never sees strided views.
"""
import os

import numpy as np

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

ENV_VAR = "ANOSOVFAM_BACKEND"


def _select():
    want = os.environ.get(ENV_VAR, "").strip().lower()
    if want == "numpy":
        return "numpy", _numpy
    if want not in ("", "numba"):
        raise ValueError(f"{ENV_VAR} must be 'numba' or 'numpy', got {want!r}")
    if _numba is None:
        if want == "numba":
            raise ImportError(f"{ENV_VAR}=numba but numba is not importable")
        return "numpy", _numpy
    return "numba", _numba


BACKEND, _impl = _select()


def get_backend(name):
    """Return the raw kernel module for ``name`` (used by tests and benchmarks)."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        if _numba is None:
            raise ImportError("numba backend unavailable")
        return _numba
    raise ValueError(name)


def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def accumulate(P, J):
    return _impl.accumulate(_f(P), _f(J))


def top_left_subspace(P, r):
    return _impl.top_left_subspace(_f(P), int(r))


def subspace_distance(U, V):
    return _impl.subspace_distance(_f(U), _f(V))


def op_norm(M):
    return _impl.op_norm(_f(M))


def cone_margins(T, X, k, alpha, unstable):
    return _impl.cone_margins(_f(T), _f(X), int(k), float(alpha), bool(unstable))


def trig_sum(x, axes, freqs, amps, phases):
    return _impl.trig_sum(
        _f(x), np.ascontiguousarray(axes, dtype=np.int64), _f(freqs), _f(amps), _f(phases)
    )


def trig_sum_indexed(x, idx, axes, freqs, amps, phases):
    return _impl.trig_sum_indexed(
        _f(x), np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(axes, dtype=np.int64),
        _f(freqs), _f(amps), _f(phases),
    )


def bank_inverse(Q, idx, A, b, Ainv, axes, freqs, amps, phases, tol, maxiter):
    return _impl.bank_inverse(
        _f(Q), np.ascontiguousarray(idx, dtype=np.int64), _f(A), _f(b), _f(Ainv),
        np.ascontiguousarray(axes, dtype=np.int64), _f(freqs), _f(amps), _f(phases),
        float(tol), int(maxiter),
    )
