"""Backend selection for the Kalman recursion.

The compiled extension is used when it imports; otherwise the NumPy
implementation is used. Setting ``STSAD_PURE_PYTHON=1`` forces the
fallback (useful for benchmarking and for parity tests).
"""

import os

from . import _kalman_py

_compiled = None
if os.environ.get("STSAD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kalman as _compiled
    except ImportError:  # extension not built
        _compiled = None

if _compiled is not None:
    filter_loop = _compiled.filter_loop
    BACKEND = "cython"
else:
    filter_loop = _kalman_py.filter_loop
    BACKEND = "python"

python_filter_loop = _kalman_py.filter_loop
compiled_filter_loop = None if _compiled is None else _compiled.filter_loop
