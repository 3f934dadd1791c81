"""Pure-Python evidence replay, used when the compiled kernel is unavailable."""

import math

import numpy as np


def confidence_weights(logits):
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    lnc = math.log(c)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        row = logits[i]
        mx = max(row)
        z = sum(math.exp(v - mx) for v in row)
        h = 0.0
        for v in row:
            p = math.exp(v - mx) / z
            if p > 0.0:
                h -= p * math.log(p)
        out[i] = max(0.0, 1.0 - h / lnc)
    return out


def replay(evidence, weights, thresholds):
    evidence = np.asarray(evidence, dtype=np.float64)
    n, c = evidence.shape
    k = len(thresholds)
    steps = np.full(k, n, dtype=np.int64)
    halted = np.zeros(k, dtype=np.uint8)
    decided = np.zeros((k, c), dtype=np.float64)
    acc = [0.0] * c
    remaining = k
    for t in range(n):
        w = float(weights[t])
        for j in range(c):
            acc[j] += w * float(evidence[t, j])
        mx = max(acc)
        for q in range(k):
            if not halted[q] and mx >= thresholds[q]:
                halted[q] = 1
                steps[q] = t + 1
                decided[q] = acc
                remaining -= 1
        if remaining == 0:
            break
    for q in range(k):
        if not halted[q]:
            decided[q] = acc
    return steps, halted, decided
