"""Hot loops, compiled when the extension is built.

Set ``OTAGCRL_PURE_PYTHON=1`` to force the pure-Python implementation.
"""

import os

from . import _kernels_py

if os.environ.get("OTAGCRL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

COMPILED = _impl is not _kernels_py
BACKEND = "cython" if COMPILED else "python"

bfs_all_pairs = _impl.bfs_all_pairs
option_successors = _impl.option_successors
run_episode = _impl.run_episode
adam_update = _impl.adam_update
polyak_update = _impl.polyak_update
scatter_add_rows = _impl.scatter_add_rows

__all__ = ["bfs_all_pairs", "option_successors", "run_episode", "adam_update", "polyak_update",
           "scatter_add_rows", "COMPILED", "BACKEND"]
