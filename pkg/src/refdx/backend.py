"""Kernel backend selection.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback is used. Set ``REFDX_BACKEND=python`` to force the fallback.
"""

import os

from refdx import _fallback

BACKEND = "python"
_compiled = None

if os.environ.get("REFDX_BACKEND", "").lower() != "python":
    try:
        from refdx import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "compiled"

_impl = _compiled if _compiled is not None else _fallback


def compiled_available():
    return _compiled is not None


def get_kernels(name=None):
    """Return the kernel module for ``name`` ("compiled" or "python"), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def cosine_scores(rows, query):
    return _impl.cosine_scores(rows, query)


def top_k_indices(scores, k):
    return _impl.top_k_indices(scores, k)
