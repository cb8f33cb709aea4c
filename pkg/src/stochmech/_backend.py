"""Kernel backend selection.

The compiled extension is used when it was built and importable; setting
``STOCHMECH_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("STOCHMECH_PURE_PYTHON", "") not in ("", "0"):
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
    except ImportError:
        kernels = _kernels_py

BACKEND = kernels.BACKEND


def get_kernels(name=None):
    """Return a kernel module by name (``"compiled"`` or ``"python"``).

    ``None`` gives the import-time selection.
    """
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels  # type: ignore[attr-defined]
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
