"""Kernel dispatch.

The numba kernels are used by default. Setting ``SILA_DISABLE_NUMBA=1`` in the
environment (before import) selects the pure-numpy path instead; it is also
used automatically when numba cannot be imported.
"""

import os

import numpy as np

from . import _kernels_numpy

USE_NUMBA = os.environ.get("SILA_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from . import _kernels_numba as _impl
    except ImportError:  # pragma: no cover
        USE_NUMBA = False
        _impl = _kernels_numpy
else:
    _impl = _kernels_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"



def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def row_logsumexp(z):
    """Stable log-sum-exp of each row of a 2-D array."""
    return _impl.row_logsumexp(_f64(z))


def row_softmax(z):
    return _impl.row_softmax(_f64(z))


def topk_hits(z, labels, k):
    """Boolean mask: is the label among the top ``k`` scores of its row."""
    return _impl.topk_hits(_f64(z), np.ascontiguousarray(labels, dtype=np.int64), int(k))


def assign_exits(confidence, thresholds):
    """0-based exit per row: first exit whose confidence reaches its threshold, else the last."""
    return _impl.assign_exits(_f64(confidence), _f64(thresholds))

__all__ = ["BACKEND", "USE_NUMBA", "row_logsumexp", "row_softmax", "topk_hits", "assign_exits"]
