"""Temperature optimizers over cached logits.

Every calibrator here consumes logit records (original logits plus the
style-shifted and content-shifted logits of a same-class pairing) and
returns a single temperature, or one per sample for the nearest-cluster
baseline. Model parameters are never touched.

The consistency objective is::

    L(T) = NLL(T) + l_style * KL(p_T(f) || p_1(f_style)) + l_content * KL(p_T(f) || p_1(f_content))

The shifted branches are not temperature-scaled, so they are constants in
``T`` and the search is one-dimensional.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .numerics import KL_FLOOR, kl_divergence, log_softmax_t, make_rng, softmax_t
from . import metrics

T_MIN, T_MAX = 0.05, 10.0
LAMBDA_GRID = (0.0, 0.25, 0.5, 1.0, 2.0)
METHODS = ("vanilla", "ts", "cts", "cts-s", "cts-c", "classwise", "perturb-ts", "ccdg-nn")


@dataclass
class LogitRecord:
    id: int
    domain: int
    label: int
    logits: list
    partner_id: int
    style_shifted: list
    content_shifted: list
    pairing: int = 0


@dataclass
class LogitBatch:
    """Column-oriented view of a list of ``LogitRecord``.

    ``partner_logits``/``partner_labels`` are resolved from the full record
    set at construction so that subsets keep them; they are NaN / -1 when
    the partner is not among the records.
    """
    ids: np.ndarray
    domains: np.ndarray
    labels: np.ndarray
    pairing: np.ndarray
    logits: np.ndarray
    partner_ids: np.ndarray
    style: np.ndarray
    content: np.ndarray
    partner_logits: np.ndarray
    partner_labels: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self):
        return self.logits.shape[1]

    @classmethod
    def from_arrays(cls, ids, domains, labels, logits, partner_ids=None, style=None,
                    content=None, pairing=None):
        logits = np.asarray(logits, dtype=np.float64)
        n = len(logits)
        ids = np.asarray(ids, dtype=np.int64)
        partner_ids = ids.copy() if partner_ids is None else np.asarray(partner_ids, dtype=np.int64)
        style = logits.copy() if style is None else np.asarray(style, dtype=np.float64)
        content = logits.copy() if content is None else np.asarray(content, dtype=np.float64)
        pairing = np.zeros(n, dtype=np.int64) if pairing is None else np.asarray(pairing, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or logits.shape[1] < 2:
            raise InputError(f"logits must be (N, K>=2), got {logits.shape}")
        for name, arr in (("style_shifted", style), ("content_shifted", content)):
            if arr.shape != logits.shape:
                raise InputError(f"{name} shape {arr.shape} != logits {logits.shape}")
        for arr in (logits, style, content):
            if not np.all(np.isfinite(arr)):
                raise InputError("logit vectors must be finite")
        if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
            raise InputError("label out of range")
        # one original logit vector per sample id
        by_id = {}
        for i, sid in enumerate(ids.tolist()):
            by_id.setdefault(sid, i)
        pl = np.full_like(logits, np.nan)
        plab = np.full(n, -1, dtype=np.int64)
        for i, pid in enumerate(partner_ids.tolist()):
            j = by_id.get(pid)
            if j is not None:
                pl[i] = logits[j]
                plab[i] = labels[j]
        return cls(ids, np.asarray(domains, dtype=np.int64), labels, pairing, logits,
                   partner_ids, style, content, pl, plab)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            raise InputError("no records")
        return cls.from_arrays(
            ids=[r.id for r in records], domains=[r.domain for r in records],
            labels=[r.label for r in records], logits=[r.logits for r in records],
            partner_ids=[r.partner_id for r in records],
            style=[r.style_shifted for r in records],
            content=[r.content_shifted for r in records],
            pairing=[r.pairing for r in records])

    def records(self):
        return [LogitRecord(int(self.ids[i]), int(self.domains[i]), int(self.labels[i]),
                            self.logits[i].tolist(), int(self.partner_ids[i]),
                            self.style[i].tolist(), self.content[i].tolist(), int(self.pairing[i]))
                for i in range(len(self))]

    def subset(self, index):
        return LogitBatch(*(getattr(self, f)[index] for f in self.__dataclass_fields__))

    def unique_samples(self):
        """First record of every sample id (one row per sample)."""
        _, first = np.unique(self.ids, return_index=True)
        return self.subset(np.sort(first))

    def check_same_class_partners(self):
        known = self.partner_labels >= 0
        bad = known & (self.partner_labels != self.labels)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise InputError(f"record {self.ids[i]} is paired with a different-class partner "
                             f"{self.partner_ids[i]}")


def as_batch(records):
    if isinstance(records, LogitBatch):
        if len(records) == 0:
            raise InputError("no records")
        return records
    return LogitBatch.from_records(records)


@dataclass(frozen=True)
class LossWeights:
    lambda_style: float = 1.0
    lambda_content: float = 1.0

    def __post_init__(self):
        if self.lambda_style < 0 or self.lambda_content < 0:
            raise ConfigError("loss weights must be non-negative")


def _weights(w):
    if w is None:
        return LossWeights(0.0, 0.0)
    if isinstance(w, LossWeights):
        return w
    return LossWeights(float(w[0]), float(w[1]))


@dataclass
class Temperature:
    value: float
    method: str
    objective: float
    trace: list = field(default_factory=list)
    weights: LossWeights = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        w = self.weights
        return {
            "value": self.value, "method": self.method, "objective": self.objective,
            "lambda1": None if w is None else w.lambda_style,
            "lambda2": None if w is None else w.lambda_content,
            "trace_length": len(self.trace), **self.extra,
        }


# --- losses -----------------------------------------------------------------

def nll_loss(records, T):
    b = as_batch(records)
    logp = log_softmax_t(b.logits, T)
    return float(-np.mean(logp[np.arange(len(b)), b.labels]))


def _consistency(b, shifted, T):
    p = softmax_t(b.logits, T)
    return float(np.mean(kl_divergence(p, softmax_t(shifted, 1.0))))


def style_loss(records, T):
    b = as_batch(records)
    return _consistency(b, b.style, T)


def content_loss(records, T):
    b = as_batch(records)
    b.check_same_class_partners()
    return _consistency(b, b.content, T)


def total_loss(records, T, weights=None):
    b = as_batch(records)
    w = _weights(weights)
    loss = nll_loss(b, T)
    if w.lambda_style:
        loss += w.lambda_style * style_loss(b, T)
    if w.lambda_content:
        loss += w.lambda_content * content_loss(b, T)
    return loss


def total_loss_grad(records, T, weights=None):
    """Analytic d total_loss / dT.

    With p = softmax(f/T) and fbar = sum_k p_k f_k:
    dp_k/dT = -p_k (f_k - fbar) / T^2, d NLL/dT = mean (f_y - fbar) / T^2 and
    d KL(p||q)/dT = sum_k dp_k/dT * (f_k/T - log q_k).
    """
    b = as_batch(records)
    w = _weights(weights)
    p = softmax_t(b.logits, T)
    f = b.logits
    fbar = np.sum(p * f, axis=1)
    n = len(b)
    grad = float(np.mean(f[np.arange(n), b.labels] - fbar)) / (T * T)
    dp = -p * (f - fbar[:, None]) / (T * T)
    for lam, shifted in ((w.lambda_style, b.style), (w.lambda_content, b.content)):
        if lam:
            logq = np.log(np.maximum(softmax_t(shifted, 1.0), KL_FLOOR))
            grad += lam * float(np.mean(np.sum(dp * (f / T - logq), axis=1)))
    if w.lambda_content:
        b.check_same_class_partners()
    return grad


def classwise_objective(records, T, pair_weight=1.0):
    """NLL plus the mean squared gap between the scaled max-confidence of
    each sample and that of its same-class partner."""
    b = as_batch(records)
    loss = nll_loss(b, T)
    if pair_weight == 0:
        return loss
    if np.any(b.partner_labels < 0):
        raise InputError("class-wise objective needs every partner among the records")
    b.check_same_class_partners()
    ci = softmax_t(b.logits, T).max(axis=1)
    cj = softmax_t(b.partner_logits, T).max(axis=1)
    return loss + pair_weight * float(np.mean((ci - cj) ** 2))


# --- one-dimensional search ----------------------------------------------------

INV_PHI = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class SearchConfig:
    t_min: float = T_MIN
    t_max: float = T_MAX
    grid_points: int = 200
    tol: float = 1e-6


def golden_section(f, a, b, tol, trace):
    """Golden-section minimisation of ``f`` on [a, b] until b - a <= tol."""
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    trace += [(c, fc), (d, fd)]
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
            trace.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
            trace.append((d, fd))
    return (c, fc) if fc <= fd else (d, fd)


def minimize_temperature(objective, search=SearchConfig()):
    """Coarse log-spaced scan followed by golden-section refinement around
    the best grid point. Returns ``(T, loss, trace)``."""
    def safe(t):
        v = objective(t)
        return v if np.isfinite(v) else math.inf

    grid = np.geomspace(search.t_min, search.t_max, search.grid_points)
    trace = [(float(t), safe(float(t))) for t in grid]
    losses = np.array([v for _, v in trace])
    if not np.any(np.isfinite(losses)):
        raise NumericError("objective is non-finite over the whole temperature range")
    i = int(np.argmin(losses))
    lo = float(grid[max(i - 1, 0)])
    hi = float(grid[min(i + 1, len(grid) - 1)])
    t, v = golden_section(safe, lo, hi, search.tol, trace)
    if losses[i] < v:
        t, v = float(grid[i]), float(losses[i])
    return float(t), float(v), trace


def optimize_temperature(records, weights=None, search=SearchConfig(), method=None):
    b = as_batch(records)
    w = _weights(weights)
    if w.lambda_content:
        b.check_same_class_partners()
    t, v, trace = minimize_temperature(lambda T: total_loss(b, T, w), search)
    if method is None:
        method = "ts" if (w.lambda_style, w.lambda_content) == (0, 0) else "cts"
    return Temperature(t, method, v, trace, w)


def optimize_classwise(records, pair_weight=1.0, search=SearchConfig()):
    b = as_batch(records)
    t, v, trace = minimize_temperature(lambda T: classwise_objective(b, T, pair_weight), search)
    return Temperature(t, "classwise", v, trace, None, {"pair_weight": pair_weight})


# --- lambda selection ----------------------------------------------------------

def holdout_split(batch, fraction=0.2, seed=0):
    """Split records by sample id so all pairings of a sample stay together."""
    ids = np.unique(batch.ids)
    rng = make_rng(seed)
    n_hold = max(1, int(round(fraction * len(ids))))
    if n_hold >= len(ids):
        raise ConfigError("calibration set too small for a held-out slice")
    held = set(ids[rng.permutation(len(ids))[:n_hold]].tolist())
    mask = np.array([i in held for i in batch.ids.tolist()])
    return batch.subset(~mask), batch.subset(mask)


def lambda_candidates(method, grid=LAMBDA_GRID):
    if method == "cts":
        return [LossWeights(a, b) for a in grid for b in grid if (a, b) != (0, 0)]
    if method == "cts-s":
        return [LossWeights(a, 0.0) for a in grid if a > 0]
    if method == "cts-c":
        return [LossWeights(0.0, b) for b in grid if b > 0]
    raise ConfigError(f"method {method!r} has no lambda grid")


DEFAULT_WEIGHTS = {"cts": LossWeights(1.0, 1.0), "cts-s": LossWeights(1.0, 0.0),
                   "cts-c": LossWeights(0.0, 1.0)}


def select_weights(records, method="cts", grid=LAMBDA_GRID, holdout=0.2, seed=0,
                   search=SearchConfig(), R=10):
    """Pick the weights whose temperature, fitted on 80% of the calibration
    samples, gives the lowest ECE on the remaining 20%. Ties keep the first
    candidate in grid order."""
    b = as_batch(records)
    fit, held = holdout_split(b, holdout, seed)
    held = held.unique_samples()
    best, best_ece, scores = None, math.inf, []
    for w in lambda_candidates(method, grid):
        t = optimize_temperature(fit, w, search).value
        e = metrics.ece(metrics.confidences(held.logits, held.labels, t), R)
        scores.append((w.lambda_style, w.lambda_content, e))
        if e < best_ece:
            best, best_ece = w, e
    return best, scores


def fit_cts(records, method="cts", weights=None, lambda_grid=True, seed=0,
            search=SearchConfig()):
    """CTS or one of its single-loss ablations, optionally with grid-searched weights."""
    b = as_batch(records)
    scores = None
    if weights is None:
        if lambda_grid:
            weights, scores = select_weights(b, method, seed=seed, search=search)
        else:
            weights = DEFAULT_WEIGHTS[method]
    temp = optimize_temperature(b, weights, search, method=method)
    if scores is not None:
        temp.extra["lambda_scores"] = scores
    return temp


# --- baselines -----------------------------------------------------------------

PERTURB_SEVERITIES = (0.05, 0.1, 0.2)


def perturb_augment(images, labels, severities, rng):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    xs, ys = [images], [labels]
    for s in severities:
        xs.append(np.clip(images + rng.normal(0.0, s, size=images.shape), 0.0, 1.0))
        ys.append(labels)
    return np.concatenate(xs), np.concatenate(ys)


def perturb_ts(calib_images, calib_labels, model, severities=PERTURB_SEVERITIES, rng=None,
               search=SearchConfig()):
    """Vanilla TS on the calibration set plus Gaussian pixel-noise copies."""
    from .model import predict_logits

    rng = rng if rng is not None else make_rng(0)
    x, y = perturb_augment(calib_images, calib_labels, severities, rng)
    logits = predict_logits(model, x)
    b = LogitBatch.from_arrays(np.arange(len(y)), np.zeros(len(y)), y, logits)
    temp = optimize_temperature(b, None, search, method="perturb-ts")
    temp.extra["augmented_size"] = len(y)
    return temp


@dataclass
class ClusterTable:
    domains: list
    centroids: np.ndarray  # (D, K)
    temperatures: np.ndarray  # (D,)


def ccdg_nn_build(records, search=SearchConfig()):
    """One cluster per calibration domain: mean logit vector and its own TS."""
    b = as_batch(records).unique_samples()
    domains = sorted(set(b.domains.tolist()))
    if not domains:
        raise ConfigError("no calibration domains")
    cents, temps = [], []
    for d in domains:
        part = b.subset(b.domains == d)
        if len(part) == 0:
            raise ConfigError(f"calibration domain {d} is empty")
        cents.append(part.logits.mean(axis=0))
        temps.append(optimize_temperature(part, None, search).value)
    return ClusterTable(domains, np.array(cents), np.array(temps))


def ccdg_nn_assign(table, target_logits):
    """Temperature of the nearest centroid (Euclidean, ties to the lowest domain)."""
    f = np.atleast_2d(np.asarray(target_logits, dtype=np.float64))
    if len(table.domains) == 0:
        raise ConfigError("empty cluster table")
    d2 = ((f[:, None, :] - table.centroids[None, :, :]) ** 2).sum(axis=2)
    return table.temperatures[np.argmin(d2, axis=1)]


def accuracy(records, T=1.0):
    b = as_batch(records)
    return metrics.accuracy(b.logits, b.labels, T)
