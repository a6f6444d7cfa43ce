"""Hot-path kernel selection.

The compiled extension (``bidistill._kernels_c``) is used when it was built;
otherwise the numpy implementation in ``_kernels_py`` is used.  Setting the
environment variable ``BIDISTILL_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
bag_forward = _kernels_py.bag_forward
bag_backward = _kernels_py.bag_backward
sgd_update = _kernels_py.sgd_update

if os.environ.get("BIDISTILL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        bag_forward = _kernels_c.bag_forward
        bag_backward = _kernels_c.bag_backward
        sgd_update = _kernels_c.sgd_update


def use_backend(name: str):
    """Switch kernels at runtime ("python" or "compiled"); used by the benchmark."""
    global BACKEND, bag_forward, bag_backward, sgd_update
    if name == "python":
        mod = _kernels_py
    elif name == "compiled":
        from . import _kernels_c as mod
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    bag_forward, bag_backward, sgd_update = mod.bag_forward, mod.bag_backward, mod.sgd_update
    BACKEND = name


def available() -> list[str]:
    try:
        from . import _kernels_c  # noqa: F401
    except ImportError:
        return ["python"]
    return ["python", "compiled"]
