"""Training, metrics, nested cross-validation and threshold sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import StratifiedKFold, train_test_split

from . import numerics as nx
from .accumulator import (AccumulatorConfig, EvidenceModel, ordered_evidence,
                          replay_thresholds, stream_loss, with_threshold)
from .baselines import POOLINGS, aggregate_predict, pooled_loss, voting_loss, slice_labels
from .data import DataError
from .numerics import ConfigError

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    max_epochs: int = 8
    patience: int = 3
    seed: int = 0
    batch_subjects: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1 or self.patience < 1 or self.patience > self.max_epochs:
            raise ConfigError(f"need 1 <= patience ({self.patience}) <= max_epochs ({self.max_epochs})")
        if self.batch_subjects < 1:
            raise ConfigError("batch_subjects must be >= 1")

    @classmethod
    def full_scale(cls):
        return cls(lr=1e-5, weight_decay=0.05, max_epochs=50, patience=10)

    def to_dict(self):
        return asdict(self)


@dataclass
class SweepGrid:
    start: float = 0.05
    stop: float = 1.05
    step: float = 0.05

    def __post_init__(self):
        if not self.step > 0 or self.start > self.stop:
            raise ConfigError(f"bad sweep grid {self.start}:{self.stop}:{self.step}")

    @classmethod
    def parse(cls, text):
        try:
            a, b, c = (float(v) for v in text.split(":"))
        except ValueError:
            raise ConfigError(f"thresholds must look like start:stop:step, got {text!r}") from None
        return cls(a, b, c)

    def values(self):
        k = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return [round(self.start + i * self.step, 10) for i in range(k)]

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


def roc_auc(scores, labels):
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    auc: float | None
    mean_slices: float | None = None
    std_slices: float | None = None
    slice_fraction: float | None = None
    n: int = 0

    def to_dict(self):
        return asdict(self)


def confusion(predictions, labels):
    p = np.asarray(predictions)
    y = np.asarray(labels)
    tp = int(((p == 1) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    return tp, tn, fp, fn


def evaluate_metrics(predictions, labels, scores=None, slices=None, available=None):
    """Confusion-matrix metrics with class 1 as positive, plus AUC and slice counts.

    Metrics that are undefined for the given labels (no positives, no
    negatives) come back as ``None``.
    """
    if len(predictions) != len(labels) or not len(labels):
        raise ValueError("predictions and labels must be non-empty and equal length")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be binary")
    tp, tn, fp, fn = confusion(predictions, labels)
    total = tp + tn + fp + fn
    auc = None
    if scores is not None:
        try:
            auc = roc_auc(scores, labels)
        except UndefinedMetricError:
            auc = None
    rep = MetricsReport(
        accuracy=(tp + tn) / total,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        auc=auc,
        n=total,
    )
    if slices is not None:
        s = np.asarray(slices, dtype=np.float64)
        rep.mean_slices = float(s.mean())
        rep.std_slices = float(s.std())
        if available is not None:
            rep.slice_fraction = float(s.sum() / np.sum(available))
    return rep


def summarize(reports):
    """Mean and (population) std of each metric across folds, skipping ``None``."""
    out = {}
    for key in ("accuracy", "sensitivity", "specificity", "auc", "mean_slices", "slice_fraction"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = {"mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None}
    return out


# ----------------------------------------------------------------------
# methods: how a model turns one subject into a loss / a decision
# ----------------------------------------------------------------------


class EvidenceMethod:
    """Threshold-halted evidence accumulation."""

    name = "nyctale"

    def __init__(self, acc_cfg: AccumulatorConfig, order="left_to_right"):
        self.acc_cfg = acc_cfg
        self.order = order

    def loss(self, model, sample):
        return stream_loss(model, sample.slices, sample.label, self.acc_cfg, self.order)

    def predict(self, model, samples, thresholds=None):
        """Per-subject arrays ``(labels, probs, steps)``, one column per threshold."""
        thresholds = [self.acc_cfg.threshold] if thresholds is None else list(thresholds)
        labels, probs, steps = [], [], []
        with nx.no_grad():
            for s in samples:
                e = ordered_evidence(model, s.slices, self.order).data
                r = replay_thresholds(e, thresholds, self.acc_cfg.weighting)
                labels.append(r["label"])
                probs.append(r["prob"])
                steps.append(r["steps"])
        return np.array(labels), np.array(probs), np.array(steps)


class AggregationMethod:
    """Subject-level baseline over all slices: voting, gmp or gap."""

    def __init__(self, kind):
        if kind not in ("voting",) + POOLINGS:
            raise ConfigError(f"unknown aggregation {kind!r}")
        self.kind = kind
        self.name = kind

    def loss(self, model, sample):
        if self.kind == "voting":
            return voting_loss(model, sample.slices, sample.label), sample.n
        return pooled_loss(model, sample.slices, sample.label, self.kind), sample.n

    def predict(self, model, samples, thresholds=None):
        labels, probs, steps = [], [], []
        with nx.no_grad():
            for s in samples:
                if self.kind == "voting":
                    per_slice = slice_labels(model, s.slices)
                    labels.append(aggregate_predict(per_slice, "voting"))
                    probs.append(float(np.mean(per_slice)))
                else:
                    feats = model.features(s.slices).data
                    label, p1 = aggregate_predict(feats, self.kind, model.head, return_prob=True)
                    labels.append(label)
                    probs.append(p1)
                steps.append(s.n)
        return (np.array(labels)[:, None], np.array(probs)[:, None], np.array(steps)[:, None])


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch, val_loss):
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False


def mean_loss(model, method, samples):
    if not samples:
        return math.nan
    with nx.no_grad():
        return float(np.mean([float(method.loss(model, s)[0].data) for s in samples]))


def _run_epoch(model, method, samples, cfg, rng):
    order = rng.permutation(len(samples))
    total, consumed = 0.0, 0
    for start in range(0, len(order), cfg.batch_subjects):
        batch = order[start:start + cfg.batch_subjects]
        model.store.zero_grad()
        loss = None
        for i in batch:
            li, t = method.loss(model, samples[i])
            total += float(li.data)
            consumed += t
            loss = li if loss is None else loss + li
        if len(batch) > 1:
            loss = loss * (1.0 / len(batch))
        nx.backward(loss)
        nx.adamw_step(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    return total / len(samples), consumed


def train(model, trainset, valset, cfg: TrainConfig, method, epochs=None):
    """Fit ``model`` in place; keeps the weights of the best validation epoch.

    With ``valset`` empty (or ``epochs`` given) no early stopping happens and
    exactly ``epochs`` (default ``max_epochs``) epochs run.
    """
    if not trainset:
        raise DataError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    fixed = epochs is not None or not valset
    n_epochs = epochs if epochs is not None else cfg.max_epochs
    stopper = EarlyStopping(cfg.patience)
    best_state = model.store.state()
    for epoch in range(1, n_epochs + 1):
        train_loss, consumed = _run_epoch(model, method, trainset, cfg, rng)
        val_loss = math.nan if fixed else mean_loss(model, method, valset)
        result.history.append({"epoch": epoch, "train_loss": train_loss,
                               "val_loss": val_loss, "slices": consumed})
        log.debug("epoch %d train %.4f val %.4f slices %d", epoch, train_loss, val_loss, consumed)
        if fixed:
            continue
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = model.store.state()
        if stop:
            result.stopped_early = True
            break
    if fixed:
        result.best_epoch = n_epochs
    else:
        model.store.load_state(best_state)
        result.best_epoch = stopper.best_epoch
        result.best_val_loss = stopper.best
    return result


# ----------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------


def outer_folds(labels, k, seed):
    """Stratified k-fold test-index sets, deterministic in ``seed``."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2)
    if counts.min() < k:
        raise SplitError(f"{k}-fold stratification needs >= {k} subjects per class, got {counts.tolist()}")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [np.sort(test) for _, test in skf.split(np.zeros(len(labels)), labels)]


def inner_split(indices, labels, val_fraction, seed):
    """Stratified train/validation split of ``indices``."""
    indices = np.asarray(indices)
    y = np.asarray(labels)[indices]
    tr, va = train_test_split(indices, test_size=val_fraction, stratify=y, random_state=seed)
    return np.sort(tr), np.sort(va)


def inner_kfold(indices, labels, k, seed):
    indices = np.asarray(indices)
    y = np.asarray(labels)[indices]
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [(np.sort(indices[a]), np.sort(indices[b])) for a, b in skf.split(indices, y)]


# ----------------------------------------------------------------------
# sweeps and nested CV
# ----------------------------------------------------------------------


def threshold_sweep(model, samples, thresholds, order="left_to_right", weighting="confidence"):
    """Accuracy and slice use of one trained model at every threshold."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ConfigError("empty threshold grid")
    method = EvidenceMethod(AccumulatorConfig(thresholds[0], weighting), order)
    labels, _, steps = method.predict(model, samples, thresholds)
    y = np.array([s.label for s in samples])
    avail = np.array([s.n for s in samples])
    rows = []
    for q, th in enumerate(thresholds):
        rows.append({"threshold": th,
                     "accuracy": float(np.mean(labels[:, q] == y)),
                     "mean_slices": float(steps[:, q].mean()),
                     "slice_fraction": float(steps[:, q].sum() / avail.sum())})
    return rows


def select_threshold(model, samples, thresholds, method):
    """Threshold with the best accuracy on ``samples``; ties go to the smallest."""
    labels, _, _ = method.predict(model, samples, thresholds)
    y = np.array([s.label for s in samples])
    accs = (labels == y[:, None]).mean(axis=0)
    best = int(np.flatnonzero(accs == accs.max())[0])
    return float(thresholds[best]), accs


@dataclass
class FoldResult:
    fold: int
    test_ids: list
    inner_train_ids: list
    inner_val_ids: list
    threshold: float | None
    metrics: MetricsReport
    inner_accuracy: list | None = None
    train_slices_last_epoch: int = 0
    history: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    predictions: list = field(default_factory=list)


def _subset(samples, idx):
    return [samples[i] for i in idx]


def run_fold(samples, fold, test_idx, exp, method_name="nyctale"):
    """One outer fold: inner training/selection, final fit, outer-test evaluation."""
    labels = np.array([s.label for s in samples])
    rest = np.setdiff1d(np.arange(len(samples)), test_idx)
    seed = exp.seed * 1000 + fold
    tr_cfg = replace(exp.train, seed=seed)
    thresholds = exp.sweep.values()
    test = _subset(samples, test_idx)

    if exp.inner_folds > 1:
        splits = inner_kfold(rest, labels, exp.inner_folds, seed)
    else:
        splits = [inner_split(rest, labels, exp.inner_val_fraction, seed)]

    if method_name == "nyctale":
        train_method = EvidenceMethod(exp.accumulator, exp.order)
    else:
        train_method = AggregationMethod(method_name)

    inner_acc = np.zeros(len(thresholds))
    best_epochs = []
    for j, (itr, iva) in enumerate(splits):
        model = EvidenceModel(exp.encoder, seed=seed + 17 * j)
        res = train(model, _subset(samples, itr), _subset(samples, iva), tr_cfg, train_method)
        best_epochs.append(res.best_epoch)
        if method_name == "nyctale":
            _, accs = select_threshold(model, _subset(samples, iva), thresholds, train_method)
            inner_acc += accs / len(splits)

    chosen = None
    final_method = train_method
    if method_name == "nyctale":
        best = int(np.flatnonzero(inner_acc == inner_acc.max())[0])
        chosen = float(thresholds[best])
        final_method = EvidenceMethod(with_threshold(exp.accumulator, chosen), exp.order)

    epochs = max(1, int(round(np.mean(best_epochs))))
    model = EvidenceModel(exp.encoder, seed=seed)
    res = train(model, _subset(samples, rest), [], tr_cfg, final_method, epochs=epochs)

    pred, prob, steps = final_method.predict(model, test)
    y = np.array([s.label for s in test])
    avail = [s.n for s in test]
    metrics = evaluate_metrics(pred[:, 0], y, prob[:, 0], steps[:, 0], avail)
    sweep = threshold_sweep(model, test, thresholds, exp.order, exp.accumulator.weighting) \
        if method_name == "nyctale" else []
    itr_ids = sorted({samples[i].subject_id for s in splits for i in s[0]})
    iva_ids = sorted({samples[i].subject_id for s in splits for i in s[1]})
    return FoldResult(
        fold=fold,
        test_ids=[s.subject_id for s in test],
        inner_train_ids=itr_ids,
        inner_val_ids=iva_ids,
        threshold=chosen,
        metrics=metrics,
        inner_accuracy=[float(a) for a in inner_acc] if method_name == "nyctale" else None,
        train_slices_last_epoch=res.history[-1]["slices"],
        history=res.history,
        sweep=sweep,
        predictions=[{"subject_id": s.subject_id, "label": s.label, "pred": int(p), "prob": float(q),
                      "slices": int(k), "available": s.n}
                     for s, p, q, k in zip(test, pred[:, 0], prob[:, 0], steps[:, 0])],
    )


def _fold_job(args):
    samples, fold, test_idx, exp, method_name = args
    return run_fold(samples, fold, test_idx, exp, method_name)


def nested_cv(samples, exp, method_name="nyctale", workers=1):
    """Outer stratified folds with inner threshold selection; fold order is stable."""
    labels = [s.label for s in samples]
    folds = outer_folds(labels, exp.outer_folds, exp.seed)
    jobs = [(samples, f, idx, exp, method_name) for f, idx in enumerate(folds)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    return results


def pooled_sweep(fold_results):
    """Sweep rows pooled over every outer-test subject (each scored by its fold's model)."""
    if not fold_results or not fold_results[0].sweep:
        return []
    rows = []
    n_total = sum(len(f.test_ids) for f in fold_results)
    for q, row in enumerate(fold_results[0].sweep):
        acc = sum(f.sweep[q]["accuracy"] * len(f.test_ids) for f in fold_results) / n_total
        ms = sum(f.sweep[q]["mean_slices"] * len(f.test_ids) for f in fold_results) / n_total
        rows.append({"threshold": row["threshold"], "accuracy": acc, "mean_slices": ms})
    return rows


def cv_report(fold_results, method_name, exp=None):
    """JSON-ready summary in the layout of a per-fold table plus mean/std."""
    report = {
        "method": method_name,
        "folds": [{
            "fold": f.fold,
            "threshold": f.threshold,
            **f.metrics.to_dict(),
            "train_slices_last_epoch": f.train_slices_last_epoch,
            "epochs": len(f.history),
        } for f in fold_results],
        "aggregate": summarize([f.metrics for f in fold_results]),
    }
    report["aggregate"]["train_slices_last_epoch"] = {
        "mean": float(np.mean([f.train_slices_last_epoch for f in fold_results])),
        "std": float(np.std([f.train_slices_last_epoch for f in fold_results])),
    }
    if exp is not None:
        report["config"] = exp.to_dict()
    return report


def predictions_of(fold_results):
    return [p for f in fold_results for p in f.predictions]


def subject_decision(model, sample, acc_cfg, order):
    """(label, prob, slices) for one subject at ``acc_cfg.threshold``."""
    with nx.no_grad():
        e = ordered_evidence(model, sample.slices, order).data
    r = replay_thresholds(e, [acc_cfg.threshold], acc_cfg.weighting)
    return int(r["label"][0]), float(r["prob"][0]), int(r["steps"][0])

