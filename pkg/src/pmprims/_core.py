"""Select the instrumentation kernel at import time.

The compiled ``_ccore`` extension is used when it was built; otherwise, or
when ``PMPRIMS_PURE_PYTHON=1`` is set, the pure-Python ``_pycore`` fallback
is used.  Both expose the same ``ArenaCore`` class; the compiled module
additionally provides ``NodeKernel`` for the node hot paths.
"""

import os
import sys

from . import _pycore

PyArenaCore = _pycore.ArenaCore

try:
    from ._ccore import ArenaCore as CArenaCore, NodeKernel
except ImportError:  # extension not built
    CArenaCore = NodeKernel = None
if sys.byteorder != "little":
    CArenaCore = NodeKernel = None

if CArenaCore is not None and os.environ.get("PMPRIMS_PURE_PYTHON") != "1":
    ArenaCore = CArenaCore
    BACKEND = "cython"
else:
    ArenaCore = PyArenaCore
    BACKEND = "python"
