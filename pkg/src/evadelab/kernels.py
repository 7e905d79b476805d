"""Backend selection for the hot kernels.

The Cython extension is used when it was built; otherwise the numpy
fallback is imported. Setting ``EVADELAB_PURE_PYTHON=1`` forces the fallback.
"""

import logging
import os

import numpy as np

from . import _pykernels

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("EVADELAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable; using numpy fallback")

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _pykernels


def _as_batch(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected N x H x W x C batch, got shape {x.shape}")
    return x


def median_filter(x, kh, kw):
    """Per-channel median over a ``kh x kw`` window with reflected borders."""
    return _impl.median_filter(_as_batch(x), int(kh), int(kw))


def nl_means(x, a, b, c):
    """Blockwise non-local means; ``c`` is the filter strength in 8-bit units."""
    return _impl.nl_means(_as_batch(x), int(a), int(b), float(c))


def saliency_pair(alpha, beta, domain, increase=True):
    alpha = np.ascontiguousarray(alpha, dtype=np.float64)
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    domain = np.ascontiguousarray(domain, dtype=np.uint8)
    p, q = _impl.saliency_pair(alpha, beta, domain, bool(increase))
    return int(p), int(q)
