"""Backend selection for the exact search kernel.

The compiled extension is used when it was built; otherwise the pure-Python
mirror is used.  Set ``DRONEASSESS_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _search_py

if os.environ.get("DRONEASSESS_PURE_PYTHON"):
    _compiled = None
else:
    try:
        from . import _search as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
BACKENDS = {"python": _search_py.search}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled.search


def search(net, K, budget, allow_revisit=True, node_budget=10_000_000, backend=None):
    """Exhaustive branch-and-bound over feasible action sequences of one instance."""
    name = backend or BACKEND
    if name not in BACKENDS:
        raise ValueError(f"unknown search backend {name!r}; available: {sorted(BACKENDS)}")
    fn = BACKENDS[name]
    return fn(net.dist, net.adjacency, net.value, net.is_value_node, net.endpoints, int(net.depot),
              int(K), float(budget), bool(allow_revisit), int(node_budget))
