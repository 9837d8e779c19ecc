"""Backend selection for the batched CRB-trace kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``MASENSE_KERNEL=numpy`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

_FORCED = os.environ.get("MASENSE_KERNEL", "").strip().lower()

_compiled = None
if _FORCED != "numpy":
    try:
        from . import _crbkernel as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = _impl.BACKEND


def available_backends():
    out = {"numpy": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def get_backend(name=None):
    """Kernel module by name (``"numpy"`` / ``"cython"``), default the active one."""
    if name is None:
        return _impl
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"kernel backend {name!r} not available (have {sorted(backends)})")
    return backends[name]


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _c128(a):
    return np.ascontiguousarray(a, dtype=np.complex128)


def gram_matrices(x, y, u, v, wavenumber, backend=None):
    return get_backend(backend).gram_matrices(_f64(x), _f64(y), _f64(u), _f64(v), float(wavenumber))


def antenna_gram(px, py, u, v, wavenumber, backend=None):
    return get_backend(backend).antenna_gram(float(px), float(py), _f64(u), _f64(v), float(wavenumber))


def traces_from_gram(Q, rs2, noise_power, pivot_tol=1e-12, backend=None):
    return get_backend(backend).traces_from_gram(_c128(Q), _c128(rs2), float(noise_power), float(pivot_tol))


def candidate_traces(Q_rest, px, py, u, v, rs2, wavenumber, noise_power, pivot_tol=1e-12, backend=None):
    return get_backend(backend).candidate_traces(
        _c128(Q_rest), float(px), float(py), _f64(u), _f64(v), _c128(rs2),
        float(wavenumber), float(noise_power), float(pivot_tol))
