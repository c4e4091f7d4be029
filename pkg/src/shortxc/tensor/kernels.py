"""Hot-kernel backend, chosen once at import.

The compiled extension is used when it was built; ``SHORTXC_BACKEND=numpy``
forces the pure numpy fallback. Both expose the same functions.
"""
import os
from contextlib import contextmanager

from . import _pykernels

_requested = os.environ.get("SHORTXC_BACKEND", "auto").lower()

if _requested == "numpy":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels

BACKEND = _impl.BACKEND

_NAMES = (
    "im2col1d",
    "col2im1d",
    "embedding_backward",
    "gather_dot",
    "gather_dot_backward",
    "topk_rows",
    "csr_row_similarity",
    "csr_centroid_scores",
)

im2col1d = _impl.im2col1d
col2im1d = _impl.col2im1d
embedding_backward = _impl.embedding_backward
gather_dot = _impl.gather_dot
gather_dot_backward = _impl.gather_dot_backward
topk_rows = _impl.topk_rows
csr_row_similarity = _impl.csr_row_similarity
csr_centroid_scores = _impl.csr_centroid_scores


def backends():
    """Both kernel modules that are importable, keyed by name (used by benchmarks and tests)."""
    out = {"numpy": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


@contextmanager
def use_backend(name):
    """Temporarily route every kernel call through backend ``name``."""
    global BACKEND
    mod = backends()[name]
    g = globals()
    saved = {n: g[n] for n in _NAMES}, BACKEND
    g.update({n: getattr(mod, n) for n in _NAMES})
    BACKEND = mod.BACKEND
    try:
        yield mod
    finally:
        g.update(saved[0])
        BACKEND = saved[1]
