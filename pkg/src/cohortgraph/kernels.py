"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_fallback`` are used.  Setting ``COHORTGRAPH_PURE_PYTHON=1``
forces the fallback.  ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("COHORTGRAPH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def _contig(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def _float(a):
    return _contig(a, a.dtype if a.dtype in (np.float32, np.float64) else np.float64)


if _compiled is not None:

    def im2col3x3(x):
        return _compiled.im2col3x3(_float(x))

    def col2im3x3(cols, n, c, h, w):
        return _compiled.col2im3x3(_float(cols), n, c, h, w)

    def maxpool2x2(x):
        return _compiled.maxpool2x2(_float(x))

    def maxpool2x2_backward(g, arg, h, w):
        return _compiled.maxpool2x2_backward(_float(g), _contig(arg, np.int8), h, w)

    def pairwise_minkowski(a, b, weights, p):
        return _compiled.pairwise_minkowski(
            _contig(a, np.float64), _contig(b, np.float64), _contig(weights, np.float64), float(p)
        )

    def same_label_kth_distance(x, labels, k):
        return _compiled.same_label_kth_distance(
            _contig(x, np.float64), _contig(labels, np.int64), _contig(k, np.int64)
        )

    def count_within(x, radius):
        return _compiled.count_within(_contig(x, np.float64), _contig(radius, np.float64))

else:
    im2col3x3 = _fallback.im2col3x3
    col2im3x3 = _fallback.col2im3x3
    maxpool2x2 = _fallback.maxpool2x2
    maxpool2x2_backward = _fallback.maxpool2x2_backward

    def pairwise_minkowski(a, b, weights, p):
        return _fallback.pairwise_minkowski(
            np.asarray(a, np.float64), np.asarray(b, np.float64), np.asarray(weights, np.float64), float(p)
        )

    def same_label_kth_distance(x, labels, k):
        return _fallback.same_label_kth_distance(
            np.asarray(x, np.float64), np.asarray(labels), np.asarray(k, np.int64)
        )

    def count_within(x, radius):
        return _fallback.count_within(np.asarray(x, np.float64), np.asarray(radius, np.float64))
