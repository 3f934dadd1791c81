"""Evidence-replay kernels: compiled when built, pure Python otherwise.

Set ``EVISTREAM_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _replay_py

if os.environ.get("EVISTREAM_PURE_PYTHON") == "1":
    _impl = _replay_py
    BACKEND = "python"
else:
    try:
        from . import _replay as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _replay_py
        BACKEND = "python"


def confidence_weights(logits):
    """Per-row ``1 - H(softmax(row)) / ln C`` for a ``(n, C)`` logit array."""
    return _impl.confidence_weights(np.ascontiguousarray(logits, dtype=np.float64))


def replay(evidence, weights, thresholds):
    """Accumulate ``weights[t] * evidence[t]`` and find the halt step per threshold.

    Returns ``(steps, halted, decided)``: slices consumed, whether the
    threshold was reached, and the accumulated vector at decision time.
    Streams that never halt report every slice consumed and the final sum.
    """
    return _impl.replay(np.ascontiguousarray(evidence, dtype=np.float64),
                        np.ascontiguousarray(weights, dtype=np.float64),
                        np.ascontiguousarray(thresholds, dtype=np.float64))
