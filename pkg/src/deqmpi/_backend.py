"""Kernel backend selection.

The compiled extension is used when importable; ``DEQMPI_PURE_PYTHON=1``
forces the numpy fallback. Both expose the same functions.
"""
import os

from . import _pykernels

kernels = _pykernels
name = "python"

if os.environ.get("DEQMPI_PURE_PYTHON", "0") != "1":
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        name = "compiled"


def get(backend=None):
    """Return the kernel module for ``backend`` ('compiled', 'python' or None)."""
    if backend is None:
        return kernels
    if backend == "python":
        return _pykernels
    if backend == "compiled":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {backend!r}")
