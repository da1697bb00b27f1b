"""Backend selection for the integration kernels.

The compiled extension is used when importable; setting the environment
variable ``FLUORSIM_PURE_PYTHON=1`` forces the numpy implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("FLUORSIM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

propagate_affine = _impl.propagate_affine
transverse_sums = _impl.transverse_sums
# exp + BLAS matmul matches or beats the compiled loop at every size used
decay_sums = _kernels_py.decay_sums


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python'), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
