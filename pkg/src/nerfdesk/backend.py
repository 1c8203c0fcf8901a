"""Kernel backend selection.

The compiled extension is used when importable; otherwise the numpy/math
fallback takes over.  Both produce bit-identical results (the tests assert
it), so the choice affects speed only.  Set ``NERFDESK_BACKEND=numpy`` to
force the fallback or ``NERFDESK_BACKEND=compiled`` to require the
extension; the variable is optional.
"""

import os

import numpy as np


def load_impl(name):
    """Import a specific kernel implementation: 'compiled' or 'numpy'."""
    if name == "numpy":
        from . import _kernels_np
        return _kernels_np
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


_requested = os.environ.get("NERFDESK_BACKEND", "auto").strip().lower() or "auto"
if _requested == "auto":
    try:
        _impl = load_impl("compiled")
    except ImportError:
        _impl = load_impl("numpy")
elif _requested in ("compiled", "numpy"):
    _impl = load_impl(_requested)
else:
    raise ValueError(
        f"NERFDESK_BACKEND={_requested!r}: expected 'auto', 'compiled' or 'numpy'"
    )

BACKEND_NAME = _impl.BACKEND_NAME


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def exact_sum(x):
    return _impl.exact_sum(_c64(x))


def exact_rowsum(e):
    return _impl.exact_rowsum(_c64(e))


def exact_weighted_rows(p, v):
    return _impl.exact_weighted_rows(_c64(p), _c64(v))


def composite_scan(om, alpha, rgb, bg):
    return _impl.composite_scan(_c64(om), _c64(alpha), _c64(rgb), _c64(bg))


def composite_scan_backward(gpix, gop, delta, rgb, bg, om, w):
    return _impl.composite_scan_backward(
        _c64(gpix), _c64(gop), _c64(delta), _c64(rgb), _c64(bg), _c64(om), _c64(w)
    )


def chamfer_nn(p, q):
    return _impl.chamfer_nn(_c64(p), _c64(q))
