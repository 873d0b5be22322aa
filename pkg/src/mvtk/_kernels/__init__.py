"""Convolution kernel backend, chosen once at import.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is. ``MVTK_KERNELS=python`` forces the
fallback, ``MVTK_KERNELS=native`` makes a missing extension an import error.
"""

import os

from . import _pykernels

_choice = os.environ.get("MVTK_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "native":
            raise
        _impl = _pykernels

BACKEND = "native" if _impl is not _pykernels else "python"

im2col = _impl.im2col
col2im = _impl.col2im
dw_forward = _impl.dw_forward
dw_backward = _impl.dw_backward
out_size = _pykernels.out_size


def native_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"native"`` (for benchmarks and parity tests)."""
    if name == "python":
        return _pykernels
    if name == "native":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
