"""Split-search kernel selection.

The compiled kernel is used when the extension was built; setting
``CRIMEFLOW_PURE_PYTHON=1`` forces the NumPy fallback.
"""

import os

from . import _split_py

if os.environ.get("CRIMEFLOW_PURE_PYTHON", "") not in ("", "0"):
    best_split = _split_py.best_split
    BACKEND = "python"
else:
    try:
        from ._split import best_split  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:  # extension not built
        best_split = _split_py.best_split
        BACKEND = "python"

__all__ = ["best_split", "BACKEND"]
