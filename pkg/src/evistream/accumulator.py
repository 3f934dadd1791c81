"""Evidence accumulation over a stream of slices.

Each slice feature is mapped by a linear head to class logits (the slice's
evidence).  Evidence is summed with a per-slice weight until any accumulated
component reaches the threshold; the decision is the softmax argmax of the
accumulated vector.  A stream that runs out before halting is classified
from whatever has been accumulated.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from . import numerics as nx
from .data import order_slices
from .encoder import EncoderConfig, InputError, encode_slices, init_encoder_params
from .numerics import ConfigError, ContractError, DimensionError

WEIGHTINGS = ("confidence", "uniform")


@dataclass
class AccumulatorConfig:
    threshold: float = 0.5
    weighting: str = "confidence"
    fallback: str = "classify_at_end"

    def __post_init__(self):
        self.threshold = float(self.threshold)
        if not self.threshold >= 0:
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.fallback != "classify_at_end":
            raise ConfigError(f"unsupported fallback {self.fallback!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class EvidenceState:
    accumulated: np.ndarray
    steps: int = 0
    halted: bool = False

    @classmethod
    def fresh(cls, num_classes=2):
        return cls(np.zeros(num_classes, dtype=np.float64))


# ----------------------------------------------------------------------
# model: encoder + linear evidence head
# ----------------------------------------------------------------------


class EvidenceModel:
    """Encoder parameters and the evidence head in one :class:`ParamStore`."""

    def __init__(self, cfg: EncoderConfig, num_classes=2, seed=0):
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        self.cfg = cfg
        self.num_classes = num_classes
        self.store = nx.ParamStore()
        rng = np.random.default_rng(seed)
        init_encoder_params(self.store, cfg, rng)
        self.store.add("head.w", nx.xavier_uniform(rng, cfg.feature_dim, num_classes))
        self.store.add("head.b", np.zeros(num_classes))

    @property
    def head(self):
        return self.store["head.w"], self.store["head.b"]

    def features(self, images):
        return encode_slices(images, self.cfg, self.store)

    def evidence(self, images):
        """Per-slice logits ``(n, C)`` for an ``(n, H, W)`` stack."""
        return project_evidence(self.features(images), *self.head)


def project_evidence(feature, weight, bias):
    """Raw class logits ``feature @ weight + bias``; works on one or many rows."""
    feature = nx.as_tensor(feature)
    if feature.shape[-1] != weight.shape[0]:
        raise DimensionError(f"feature dim {feature.shape[-1]} != head input dim {weight.shape[0]}")
    if feature.ndim == 1:
        return (feature.reshape(1, -1) @ weight).reshape(-1) + bias
    return feature @ weight + bias


# ----------------------------------------------------------------------
# weights
# ----------------------------------------------------------------------


def confidence_weight(logits):
    """``1 - H(softmax(logits)) / ln C`` for a single logit vector."""
    return float(kernels.confidence_weights(np.asarray(logits, dtype=np.float64)[None])[0])


def stream_weights(evidence, weighting):
    """Per-slice weights for an ``(n, C)`` evidence array (no gradient)."""
    evidence = np.asarray(evidence, dtype=np.float64)
    if weighting == "uniform":
        return np.ones(evidence.shape[0])
    return kernels.confidence_weights(evidence)


def weight_tensor(evidence, weighting):
    """Differentiable per-slice weights for an ``(n, C)`` evidence tensor."""
    n, c = evidence.shape
    if weighting == "uniform":
        return nx.Tensor(np.ones(n))
    p = nx.softmax(evidence, axis=-1)
    entropy = nx.tsum(p * nx.log_softmax(evidence, axis=-1), axis=-1)  # = -H
    return 1.0 + entropy * (1.0 / math.log(c))


# ----------------------------------------------------------------------
# stepwise API
# ----------------------------------------------------------------------


def accumulate_step(state: EvidenceState, evidence, cfg: AccumulatorConfig):
    """Add one slice's weighted evidence and re-check the halting rule."""
    if state.halted:
        raise ContractError("stream already halted")
    e = np.asarray(evidence, dtype=np.float64)
    if e.shape != state.accumulated.shape:
        raise DimensionError(f"evidence shape {e.shape} != accumulator shape {state.accumulated.shape}")
    w = 1.0 if cfg.weighting == "uniform" else confidence_weight(e)
    acc = state.accumulated + w * e
    return EvidenceState(acc, state.steps + 1, bool(acc.max() >= cfg.threshold)), w


@dataclass
class StreamResult:
    label: int
    slices_consumed: int
    accumulated: np.ndarray
    halted: bool
    prob_positive: float
    trace: list = field(default_factory=list)


def decide(accumulated):
    """(label, softmax probability of class 1) from the accumulated vector."""
    acc = np.asarray(accumulated, dtype=np.float64)
    z = np.exp(acc - acc.max())
    p = z / z.sum()
    return int(np.argmax(p)), float(p[1] if len(p) > 1 else p[0])


def run_stream(slices, model: EvidenceModel, cfg: AccumulatorConfig, order="left_to_right"):
    """Encode slices one at a time until the accumulated evidence halts."""
    slices = np.asarray(slices)
    if slices.ndim != 3 or slices.shape[0] == 0:
        raise InputError(f"need a non-empty (n, H, W) stream, got shape {slices.shape}")
    state = EvidenceState.fresh(model.num_classes)
    trace = []
    with nx.no_grad():
        for idx in order_slices(slices.shape[0], order):
            e = model.evidence(slices[idx:idx + 1]).data[0].astype(np.float64)
            state, w = accumulate_step(state, e, cfg)
            trace.append({"t": state.steps, "slice": idx, "w": w, "e": e.copy(),
                          "E": state.accumulated.copy(), "halted": state.halted})
            if state.halted:
                break
    label, p1 = decide(state.accumulated)
    return StreamResult(label, state.steps, state.accumulated, state.halted, p1, trace)


# ----------------------------------------------------------------------
# batched replay: encode the whole stream once, decide for many thresholds
# ----------------------------------------------------------------------


def ordered_evidence(model, sample_slices, order):
    idx = order_slices(len(sample_slices), order)
    return model.evidence(np.asarray(sample_slices)[idx])


def replay_thresholds(evidence, thresholds, weighting="confidence"):
    """Decisions for one precomputed evidence stream under each threshold.

    Returns a dict of arrays: ``steps``, ``halted``, ``label``, ``prob``.
    """
    evidence = np.asarray(evidence, dtype=np.float64)
    w = stream_weights(evidence, weighting)
    steps, halted, decided = kernels.replay(evidence, w, np.asarray(thresholds, dtype=np.float64))
    z = np.exp(decided - decided.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    return {"steps": steps, "halted": halted.astype(bool),
            "label": p.argmax(axis=1), "prob": p[:, 1]}


def halting_step(model, ordered_slices, cfg: AccumulatorConfig):
    """Slices consumed at ``cfg.threshold``, encoding only as far as needed.

    Slices are encoded without gradients in chunks of 1, 2, 4, ... until the
    accumulated evidence halts or the stream ends.
    """
    n = len(ordered_slices)
    parts = []
    start, size = 0, 1
    with nx.no_grad():
        while start < n:
            stop = min(n, start + size)
            parts.append(model.evidence(ordered_slices[start:stop]).data)
            e = np.concatenate(parts)
            steps, halted, _ = kernels.replay(e, stream_weights(e, cfg.weighting), [cfg.threshold])
            if halted[0]:
                return int(steps[0])
            start, size = stop, 2 * size
    return n


def stream_loss(model, sample_slices, label, cfg: AccumulatorConfig, order="left_to_right"):
    """Cross-entropy on the accumulated evidence at the halting step.

    The halting step is a stopping rule, found on detached values; the loss
    is differentiable through the weights and evidence of the consumed slices,
    and only those slices are encoded with gradients.
    """
    ordered = np.asarray(sample_slices)[order_slices(len(sample_slices), order)]
    t = halting_step(model, ordered, cfg)
    e_used = model.evidence(ordered[:t])
    w = weight_tensor(e_used, cfg.weighting)
    acc = nx.tsum(e_used * w.reshape(t, 1), axis=0)
    return nx.cross_entropy_loss(acc, label), t


def trace_csv(result: StreamResult):
    """Decision trace as CSV text: one row per consumed slice."""
    buf = io.StringIO()
    c = len(result.accumulated)
    cols = ["t", "slice", "w"] + [f"e_{j}" for j in range(c)] + [f"E_{j}" for j in range(c)] + ["halted"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in result.trace:
        w.writerow([row["t"], row["slice"], repr(float(row["w"]))]
                   + [repr(float(v)) for v in row["e"]] + [repr(float(v)) for v in row["E"]]
                   + [int(row["halted"])])
    return buf.getvalue()


def with_threshold(cfg: AccumulatorConfig, threshold):
    return replace(cfg, threshold=float(threshold))
