"""Backend selection for the interval-affine kernels.

The compiled ``_ibp_core`` extension is used when it was built; otherwise the
numpy implementation is loaded. Set ``SAFEADAPT_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import importlib
import os

_FORCE_PY = os.environ.get("SAFEADAPT_PURE_PYTHON", "") not in ("", "0")


def load_backend(name: str | None = None):
    """Return the kernel module called ``name`` ("cython" or "numpy")."""
    if name == "numpy":
        return importlib.import_module("safeadapt._ibp_core_py")
    if name == "cython":
        return importlib.import_module("safeadapt._ibp_core")
    if name is not None:
        raise ValueError(f"unknown backend {name!r}")
    if not _FORCE_PY:
        try:
            return importlib.import_module("safeadapt._ibp_core")
        except ImportError:
            pass
    return importlib.import_module("safeadapt._ibp_core_py")


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        importlib.import_module("safeadapt._ibp_core")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


core = load_backend()
BACKEND = core.BACKEND
