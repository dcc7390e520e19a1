"""Episode kernel with a compiled backend and a pure-Python fallback.

The compiled extension is used when it was built and ``COOLGEN_PURE_PYTHON``
is unset; otherwise the fallback in ``_fallback`` runs. Both share one
signature and are cross-checked in the test suite.
"""
from __future__ import annotations

import os

from . import _fallback

try:
    if os.environ.get("COOLGEN_PURE_PYTHON"):
        raise ImportError("pure-Python backend forced by COOLGEN_PURE_PYTHON")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
run_episode = _compiled.run_episode if _compiled is not None else _fallback.run_episode
run_episode_python = _fallback.run_episode
run_episode_compiled = _compiled.run_episode if _compiled is not None else None

__all__ = ["BACKEND", "run_episode", "run_episode_python", "run_episode_compiled"]
