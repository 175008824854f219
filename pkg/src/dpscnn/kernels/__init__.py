"""Hot inner loops behind the layer ops.

Two interchangeable backends exist: numba-compiled loops and a pure-numpy
path. ``DPSCNN_KERNELS=numpy`` forces the numpy path; otherwise numba is used
when importable. Both backends are always reachable through :func:`backend`
so tests and benchmarks can compare them.
"""

import importlib
import os
from types import ModuleType

KERNEL_NAMES = (
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "crop_gather",
    "crop_scatter",
    "smooth2d",
)


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def backend(name: str) -> ModuleType:
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return importlib.import_module(f"{__name__}._{name}")


def _select() -> str:
    wanted = os.environ.get("DPSCNN_KERNELS", "").strip().lower()
    if wanted == "numpy":
        return "numpy"
    if wanted not in ("", "numba"):
        raise ValueError(f"DPSCNN_KERNELS must be 'numba' or 'numpy', got {wanted!r}")
    if _numba_available():
        return "numba"
    if wanted == "numba":
        raise ImportError("DPSCNN_KERNELS=numba but numba is not importable")
    return "numpy"


BACKEND = _select()
_impl = backend(BACKEND)

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
crop_gather = _impl.crop_gather
crop_scatter = _impl.crop_scatter
smooth2d = _impl.smooth2d
