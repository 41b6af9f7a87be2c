"""Hot-loop kernels: compiled extension with a pure-Python fallback.

The compiled module (``_core``, built from Cython) and the fallback
(``_fallback``, plain numpy) export the same functions with identical
signatures and semantics. The compiled one is preferred at import time;
set ``NODECONTRAST_PURE=1`` to force the fallback (used by the benchmark
and by parity tests).
"""

import os

if os.environ.get("NODECONTRAST_PURE"):
    from . import _fallback as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _fallback as _impl

BACKEND = _impl.BACKEND

walk_visit_sets = _impl.walk_visit_sets
bfs_within = _impl.bfs_within
induced_block_coo = _impl.induced_block_coo
greedy_map_select = _impl.greedy_map_select
greedy_map_gaussian = _impl.greedy_map_gaussian
projection_dpp_draw = _impl.projection_dpp_draw
kdpp_draw_many = _impl.kdpp_draw_many
dpp_draw_many = _impl.dpp_draw_many

__all__ = [
    "BACKEND",
    "walk_visit_sets",
    "bfs_within",
    "induced_block_coo",
    "greedy_map_select",
    "greedy_map_gaussian",
    "projection_dpp_draw",
    "kdpp_draw_many",
    "dpp_draw_many",
]
