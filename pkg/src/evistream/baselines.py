"""Subject-level aggregation baselines: slice voting, global max / average pooling."""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import numerics as nx
from .encoder import InputError
from .numerics import ConfigError, DimensionError

POOLINGS = ("gmp", "gap")
METHODS = ("voting",) + POOLINGS


def _as_array(x):
    return x.data if isinstance(x, nx.Tensor) else np.asarray(x)


def pool_features(features, kind):
    """Elementwise max (gmp) or mean (gap) over the slice axis of ``(n, d)`` features."""
    if kind == "gmp":
        return np.max(features, axis=0)
    if kind == "gap":
        return np.mean(features, axis=0)
    raise ConfigError(f"unknown pooling {kind!r}")


def vote(labels):
    """Most frequent label; ties go to the smallest label (class 0)."""
    counts = Counter(int(v) for v in labels)
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top)


def aggregate_predict(per_slice, method, head=None, return_prob=False):
    """Combine per-slice outputs into one subject label.

    ``voting`` takes per-slice labels.  ``gmp``/``gap`` take per-slice
    feature vectors, pool them, and classify the pooled vector with ``head``
    (a ``(weight, bias)`` pair).
    """
    if method not in METHODS:
        raise ConfigError(f"unknown aggregation {method!r}")
    if per_slice is None or len(per_slice) == 0:
        raise InputError("no slices to aggregate")
    if method == "voting":
        label = vote(per_slice)
        return (label, float(np.mean(per_slice))) if return_prob else label
    rows = [np.asarray(_as_array(r), dtype=np.float64).ravel() for r in per_slice]
    if len({len(r) for r in rows}) != 1:
        raise DimensionError(f"mixed feature dims {sorted({len(r) for r in rows})}")
    if head is None:
        raise ConfigError(f"{method} needs a classifier head")
    pooled = pool_features(np.stack(rows), method)
    w, b = (np.asarray(_as_array(h), dtype=np.float64) for h in head)
    logits = pooled @ w + b
    label = int(np.argmax(logits))
    if not return_prob:
        return label
    z = np.exp(logits - logits.max())
    return label, float(z[1] / z.sum())


def pooled_loss(model, slices, label, kind):
    """Cross-entropy of the head applied to pooled slice features."""
    feats = model.features(slices)
    pooled = nx.tmax(feats, axis=0) if kind == "gmp" else nx.mean(feats, axis=0)
    w, b = model.head
    logits = (pooled.reshape(1, -1) @ w).reshape(-1) + b
    return nx.cross_entropy_loss(logits, label)


def voting_loss(model, slices, label):
    """Mean per-slice cross-entropy, every slice labelled with its subject's label."""
    logits = model.evidence(slices)
    n = logits.shape[0]
    logp = nx.log_softmax(logits, axis=-1)
    return nx.mul(nx.tsum(logp[:, int(label)]), -1.0 / n)


def slice_labels(model, slices):
    with nx.no_grad():
        return np.argmax(model.evidence(slices).data, axis=1).tolist()
