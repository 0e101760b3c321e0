"""Calibration metrics: ECE, reliability tables, accuracy, NLL and the
prediction-variance consistency indicator."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InputError
from .numerics import log_softmax_t, softmax_t


@dataclass
class BinRow:
    low: float
    high: float
    count: int
    confidence: float  # nan when the bin is empty
    accuracy: float


@dataclass
class BinTable:
    rows: list
    n: int

    def ece(self):
        return math.fsum(r.count / self.n * abs(r.accuracy - r.confidence)
                         for r in self.rows if r.count)

    def to_csv(self):
        lines = ["bin_low,bin_high,count,confidence,accuracy"]
        for r in self.rows:
            lines.append(f"{r.low!r},{r.high!r},{r.count},{r.confidence!r},{r.accuracy!r}")
        return "\n".join(lines) + "\n"


def bin_edges(R):
    return np.linspace(0.0, 1.0, R + 1)


def bin_index(confidences, R):
    """Bin of each confidence under half-open intervals (q_r, q_{r+1}]; 0 maps to the first bin."""
    idx = np.searchsorted(bin_edges(R), confidences, side="left") - 1
    return np.clip(idx, 0, R - 1)


def _split_predictions(predictions):
    if isinstance(predictions, tuple) and len(predictions) == 2 and np.ndim(predictions[0]) == 1:
        conf, correct = predictions
    else:
        predictions = list(predictions)
        if not predictions:
            raise InputError("no predictions")
        conf, correct = zip(*predictions)
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if conf.size == 0:
        raise InputError("no predictions")
    if conf.shape != correct.shape:
        raise InputError("confidence and correctness arrays differ in length")
    if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
        raise InputError("confidences must lie in [0, 1]")
    return conf, correct


def reliability_table(predictions, R=10):
    """Per-bin counts, mean confidence and accuracy.

    ``predictions`` is a sequence of ``(confidence, correct)`` pairs or a
    tuple of two aligned arrays.
    """
    conf, correct = _split_predictions(predictions)
    edges = bin_edges(R)
    idx = bin_index(conf, R)
    rows = []
    for r in range(R):
        sel = idx == r
        count = int(sel.sum())
        if count:
            c = math.fsum(conf[sel]) / count
            a = int(correct[sel].sum()) / count
        else:
            c = a = float("nan")
        rows.append(BinRow(float(edges[r]), float(edges[r + 1]), count, c, a))
    return BinTable(rows, len(conf))


def ece(predictions, R=10):
    return reliability_table(predictions, R).ece()


def confidences(logits, labels, T=1.0):
    """Confidence of the predicted class and a correctness flag per sample.

    The predicted class is the argmax of the raw logits, which is the
    argmax at every temperature.
    """
    logits = np.asarray(logits, dtype=np.float64)
    pred = np.argmax(logits, axis=-1)
    probs = softmax_t(logits, T)
    conf = probs[np.arange(len(pred)), pred]
    return conf, pred == np.asarray(labels)


def accuracy(logits, labels, T=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    if len(logits) == 0:
        raise InputError("no records")
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))


def nll(logits, labels, T=1.0):
    logp = log_softmax_t(logits, T)
    labels = np.asarray(labels)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def prediction_variance(logit_sets):
    """Mean over logit elements of the population variance across M predictions.

    ``logit_sets`` has shape ``(M, K)`` for one sample or ``(N, M, K)``.
    """
    x = np.asarray(logit_sets, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 2:
        raise InputError("need at least 2 predictions per sample")
    return x.var(axis=-2).mean(axis=-1)


def spearman(x, y):
    """Spearman rank correlation; exact ``1 - 6 sum d^2 / (n(n^2-1))`` when there are no ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 2:
        return float("nan")
    rx, ry = rankdata(x), rankdata(y)
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        d2 = float(np.sum((rx - ry) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    if np.std(rx) == 0 or np.std(ry) == 0:
        return float("nan")
    return float(np.corrcoef(rx, ry)[0, 1])


@dataclass
class VarianceProfile:
    groups: list  # (mean variance, ECE, size) per group, low variance first
    spearman: float


def variance_ece_profile(variances, predictions, group_count=10, ids=None, R=10):
    """Sort samples by prediction variance, cut into equal-size groups and
    report each group's ECE."""
    var = np.asarray(variances, dtype=np.float64)
    conf, correct = _split_predictions(predictions)
    if len(var) != len(conf):
        raise InputError("variances and predictions are not aligned")
    if len(var) < group_count:
        raise ConfigError(f"{len(var)} samples cannot fill {group_count} groups")
    ids = np.arange(len(var)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, var))
    if np.all(var == var[0]):
        warnings.warn("all variances are equal; profile collapses to a single group")
        parts = [order]
    else:
        parts = np.array_split(order, group_count)
    groups = [(float(var[p].mean()), ece((conf[p], correct[p]), R), len(p)) for p in parts]
    rho = spearman(np.arange(len(groups)), [g[1] for g in groups])
    return VarianceProfile(groups, rho)


def extreme_quantiles(variances, fraction=0.05, ids=None):
    """Indices of the lowest and highest ``fraction`` of samples by variance (ties by id)."""
    var = np.asarray(variances, dtype=np.float64)
    ids = np.arange(len(var)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, var))
    m = max(1, int(round(fraction * len(var))))
    return order[:m], order[-m:]
