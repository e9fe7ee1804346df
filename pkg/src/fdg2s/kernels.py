"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise (or when
``FDG2S_PURE_PYTHON=1``) the numpy fallback is used. Both expose the same
functions with the same semantics.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("FDG2S_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on the build
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

window_similarity = _active.window_similarity
variation_stats = _active.variation_stats

__all__ = ["BACKEND", "window_similarity", "variation_stats",
           "python_backend", "compiled_backend"]
