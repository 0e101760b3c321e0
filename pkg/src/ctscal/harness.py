"""Experiment orchestration: logit caches, the leave-one-domain-out
benchmark and the prediction-consistency analysis."""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import jsonschema
import numpy as np

from . import calibration as cal
from . import metrics
from .calibration import LogitBatch, LossWeights, SearchConfig
from .datagen import GeneratorConfig, SplitSpec, generate, load_dataset, split
from .errors import CalibError, ConfigError, InputError
from .features import content_noise, content_swap, style_swap
from .model import SmallCnn, TrainConfig, predict_logits, train
from .numerics import derive_rng

log = logging.getLogger(__name__)

# named sub-streams of a run seed
DATA, INIT, TRAIN, PAIR, LAMBDA, PERTURB, ANALYSIS = range(7)

CACHE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "domain", "label", "pairing", "logits", "partner_id",
                 "style_shifted", "content_shifted"],
    "properties": {
        "id": {"type": "integer"},
        "domain": {"type": "integer", "minimum": 0},
        "label": {"type": "integer", "minimum": 0},
        "pairing": {"type": "integer", "minimum": 0},
        "partner_id": {"type": "integer"},
        "logits": {"type": "array", "items": {"type": "number"}, "minItems": 2},
        "style_shifted": {"type": "array", "items": {"type": "number"}, "minItems": 2},
        "content_shifted": {"type": "array", "items": {"type": "number"}, "minItems": 2},
    },
}
_VALIDATOR = jsonschema.Draft7Validator(CACHE_SCHEMA)


# --- logit cache -------------------------------------------------------------

def choose_partners(labels, domains, rng, cross_domain=True, same_class=True):
    """One partner index per sample.

    Candidates share the sample's class (unless ``same_class`` is off) and
    exclude the sample itself; candidates from another domain are preferred
    when ``cross_domain`` is set. A sample with no candidate pairs with
    itself.
    """
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    n = len(labels)
    idx = np.arange(n)
    partners = np.empty(n, dtype=np.int64)
    for i in range(n):
        pool = idx[(idx != i) & (labels == labels[i])] if same_class else idx[idx != i]
        if cross_domain:
            other = pool[domains[pool] != domains[i]]
            if len(other):
                pool = other
        if len(pool) == 0:
            log.warning("sample %d has no same-class partner; pairing it with itself", i)
            partners[i] = i
        else:
            partners[i] = pool[rng.integers(len(pool))]
    return partners


def build_logit_cache(model, calib, pairing_seed=0, pairings=3, cross_domain=True,
                      same_class_style=True):
    """Original, style-shifted and content-shifted logits for every
    calibration sample and each of ``pairings`` seeded pairings."""
    if len(calib) == 0:
        raise ConfigError("empty calibration set")
    z = model.features(calib.pixels)
    logits = model.head(z)
    cols = {k: [] for k in ("ids", "domains", "labels", "logits", "partner_ids",
                            "style", "content", "pairing")}
    for p in range(pairings):
        rng = derive_rng(pairing_seed, p)
        partner = choose_partners(calib.labels, calib.domains, rng, cross_domain)
        if same_class_style:
            style_partner = partner
        else:
            style_partner = choose_partners(calib.labels, calib.domains, rng, cross_domain,
                                            same_class=False)
        cols["ids"].append(calib.ids)
        cols["domains"].append(calib.domains)
        cols["labels"].append(calib.labels)
        cols["logits"].append(logits)
        cols["partner_ids"].append(calib.ids[partner])
        cols["style"].append(model.head(style_swap(z, z[style_partner])))
        cols["content"].append(model.head(content_swap(z, z[partner])))
        cols["pairing"].append(np.full(len(calib), p))
    return LogitBatch.from_arrays(**{k: np.concatenate(v) for k, v in cols.items()})


def record_to_json(batch, i):
    return json.dumps({
        "id": int(batch.ids[i]), "domain": int(batch.domains[i]), "label": int(batch.labels[i]),
        "pairing": int(batch.pairing[i]), "logits": batch.logits[i].tolist(),
        "partner_id": int(batch.partner_ids[i]), "style_shifted": batch.style[i].tolist(),
        "content_shifted": batch.content[i].tolist(),
    })


def write_cache(batch, path):
    with open(path, "w") as fh:
        for i in range(len(batch)):
            fh.write(record_to_json(batch, i) + "\n")


def parse_cache_line(line, where="<line>"):
    """Validate one JSON Lines record; raises ``ConfigError`` when malformed."""
    try:
        rec = json.loads(line)
    except ValueError as exc:
        raise ConfigError(f"{where}: not valid JSON ({exc})") from exc
    err = next(iter(_VALIDATOR.iter_errors(rec)), None)
    if err is not None:
        raise ConfigError(f"{where}: schema violation: {err.message}")
    if any(isinstance(rec[k], bool) for k in ("id", "domain", "label", "pairing", "partner_id")):
        raise ConfigError(f"{where}: boolean where an integer is required")
    k = len(rec["logits"])
    for name in ("logits", "style_shifted", "content_shifted"):
        vals = rec[name]
        if len(vals) != k:
            raise ConfigError(f"{where}: {name} has length {len(vals)}, expected {k}")
        if any(isinstance(v, bool) or not math.isfinite(v) for v in vals):
            raise ConfigError(f"{where}: {name} contains a non-finite value")
    if rec["label"] >= k:
        raise ConfigError(f"{where}: label {rec['label']} out of range for {k} classes")
    return cal.LogitRecord(rec["id"], rec["domain"], rec["label"], rec["logits"],
                           rec["partner_id"], rec["style_shifted"], rec["content_shifted"],
                           rec["pairing"])


def read_cache(path):
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                records.append(parse_cache_line(line, f"{path}:{n}"))
    if not records:
        raise ConfigError(f"{path}: no records")
    if len({len(r.logits) for r in records}) != 1:
        raise ConfigError(f"{path}: records disagree on the number of classes")
    try:
        return LogitBatch.from_records(records)
    except InputError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# --- configuration -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    n_per_domain_class: int = 100
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data_path: str = None
    splits: list = None  # list of SplitSpec; None means leave each domain out in turn
    targets: list = None  # restricts the default leave-out splits
    train_fraction: float = 0.9
    methods: list = field(default_factory=lambda: list(cal.METHODS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    lambda_grid: bool = True
    lambda1: float = 1.0
    lambda2: float = 1.0
    pairings: int = 3
    cross_domain_pairs: bool = True
    same_class_style: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.1))
    style_layer: str = "conv1_relu"
    perturb_severities: list = field(default_factory=lambda: list(cal.PERTURB_SEVERITIES))
    analysis: bool = True
    noise_variances: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4])
    group_count: int = 10
    quantile: float = 0.05
    bins: int = 10
    output_dir: str = "results"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [m for m in self.methods if m not in cal.METHODS]
        if bad:
            raise ConfigError(f"unsupported methods: {bad}")
        if self.pairings < 1:
            raise ConfigError("pairings must be >= 1")

    def split_specs(self):
        if self.splits:
            return list(self.splits)
        J = self.generator.n_domains
        targets = self.targets if self.targets is not None else range(J)
        return [SplitSpec.leave_out(t, J, self.train_fraction) for t in targets]

    def to_dict(self):
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        d["splits"] = None if self.splits is None else [asdict(s) for s in self.splits]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "generator" in d:
                d["generator"] = GeneratorConfig.from_dict(d["generator"])
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if d.get("splits") is not None:
                d["splits"] = [SplitSpec(**s) for s in d["splits"]]
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


# --- one benchmark cell ----------------------------------------------------------

def _evaluate(logits, labels, T, R):
    conf, correct = metrics.confidences(logits, labels, T)
    return {
        "ece": metrics.ece((conf, correct), R),
        "nll": metrics.nll(logits, labels, T),
        "accuracy": metrics.accuracy(logits, labels),
    }


def calibrate_method(method, cache, cfg, seed, model=None, calib=None):
    """Fit one method; returns a ``Temperature`` or, for ccdg-nn, a ``ClusterTable``."""
    search = SearchConfig()
    if method == "vanilla":
        return cal.Temperature(1.0, "vanilla", cal.nll_loss(cache, 1.0))
    if method == "ts":
        return cal.optimize_temperature(cache.unique_samples(), None, search)
    if method in ("cts", "cts-s", "cts-c"):
        weights = None
        if not cfg.lambda_grid:
            weights = {"cts": LossWeights(cfg.lambda1, cfg.lambda2),
                       "cts-s": LossWeights(cfg.lambda1, 0.0),
                       "cts-c": LossWeights(0.0, cfg.lambda2)}[method]
        return cal.fit_cts(cache, method, weights, cfg.lambda_grid,
                           seed=int(derive_rng(seed, LAMBDA).integers(2**31)), search=search)
    if method == "classwise":
        return cal.optimize_classwise(cache, search=search)
    if method == "perturb-ts":
        return cal.perturb_ts(calib.pixels, calib.labels, model, cfg.perturb_severities,
                              derive_rng(seed, PERTURB), search)
    if method == "ccdg-nn":
        return cal.ccdg_nn_build(cache, search)
    raise ConfigError(f"unknown method {method!r}")


def run_cell(cfg, spec, seed, data):
    """Train, build the cache, fit every method and score it on the target."""
    spec = SplitSpec(spec.train_domains, spec.calib_domains, spec.target_domain,
                     spec.train_fraction, seed)
    train_set, calib, target = split(data, spec)
    model = SmallCnn.init(cfg.generator.n_classes, derive_rng(seed, INIT, spec.target_domain),
                          cfg.style_layer)
    model, trace = train(model, train_set.pixels, train_set.labels, cfg.train,
                         derive_rng(seed, TRAIN, spec.target_domain), seed=seed)
    cache = build_logit_cache(model, calib, int(derive_rng(seed, PAIR).integers(2**31)),
                              cfg.pairings, cfg.cross_domain_pairs, cfg.same_class_style)
    target_logits = predict_logits(model, target.pixels)
    rows = []
    for method in cfg.methods:
        row = {"target": spec.target_domain, "method": method, "seed": seed}
        try:
            fitted = calibrate_method(method, cache, cfg, seed, model, calib)
            if isinstance(fitted, cal.ClusterTable):
                temps = cal.ccdg_nn_assign(fitted, target_logits)
                row.update(_evaluate(target_logits, target.labels, temps, cfg.bins))
                row.update(temperature=float(np.mean(temps)),
                           temperature_min=float(temps.min()), temperature_max=float(temps.max()),
                           cluster_temperatures=fitted.temperatures.tolist())
            else:
                row.update(_evaluate(target_logits, target.labels, fitted.value, cfg.bins))
                row["temperature"] = fitted.value
                if fitted.weights is not None and method.startswith("cts"):
                    row["lambda1"] = fitted.weights.lambda_style
                    row["lambda2"] = fitted.weights.lambda_content
        except (CalibError, ArithmeticError, ValueError) as exc:
            log.error("cell target=%s seed=%s method=%s failed: %s",
                      spec.target_domain, seed, method, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    cell = {"rows": rows, "train_loss": trace, "train_size": len(train_set),
            "calib_size": len(calib), "target_size": len(target)}
    if cfg.analysis:
        bundle = run_consistency_analysis(model, calib, target, cfg.noise_variances,
                                          derive_rng(seed, ANALYSIS, spec.target_domain),
                                          cfg.group_count, cfg.quantile, cfg.bins)
        cell["analysis"] = bundle
    return cell


# --- consistency analysis ----------------------------------------------------------

@dataclass
class AnalysisBundle:
    sample_ids: np.ndarray
    confidence: np.ndarray
    correct: np.ndarray
    variances: dict  # probe -> (N,)
    profiles: dict  # probe -> VarianceProfile
    reliability: dict  # (probe, "top"|"bottom") -> BinTable
    prediction_counts: dict

    def sample_csv(self):
        lines = ["sample_id,probe,variance,confidence,correct"]
        for probe, var in self.variances.items():
            for i, sid in enumerate(self.sample_ids.tolist()):
                lines.append(f"{sid},{probe},{var[i]!r},{self.confidence[i]!r},{int(self.correct[i])}")
        return "\n".join(lines) + "\n"

    def profile_csv(self):
        lines = ["probe,group,mean_variance,ece,size"]
        for probe, prof in self.profiles.items():
            for g, (v, e, n) in enumerate(prof.groups):
                lines.append(f"{probe},{g},{v!r},{e!r},{n}")
        return "\n".join(lines) + "\n"

    def summary(self):
        return {probe: {"spearman": prof.spearman,
                        "group_ece": [g[1] for g in prof.groups],
                        "group_variance": [g[0] for g in prof.groups],
                        "top_ece": self.reliability[(probe, "top")].ece(),
                        "bottom_ece": self.reliability[(probe, "bottom")].ece()}
                for probe, prof in self.profiles.items()}


def style_probe_logits(model, z_target, calib, z_calib, rng):
    """Logits under the original style plus one random donor style from
    each calibration domain: shape (N, 1 + D, K)."""
    out = [model.head(z_target)]
    for d in sorted(set(calib.domains.tolist())):
        pool = np.flatnonzero(calib.domains == d)
        donors = pool[rng.integers(len(pool), size=len(z_target))]
        out.append(model.head(style_swap(z_target, z_calib[donors])))
    return np.stack(out, axis=1)


def content_probe_logits(model, z_target, noise_variances, rng):
    return np.stack([model.head(content_noise(z_target, v, rng)) for v in noise_variances], axis=1)


def run_consistency_analysis(model, calib, target, noise_variances=(0.0, 0.1, 0.2, 0.3, 0.4),
                             rng=None, group_count=10, quantile=0.05, R=10):
    if len(noise_variances) < 2:
        raise InputError("content probe needs at least two noise levels")
    rng = rng if rng is not None else derive_rng(0, ANALYSIS)
    z_t = model.features(target.pixels)
    z_c = model.features(calib.pixels)
    logits = model.head(z_t)
    conf, correct = metrics.confidences(logits, target.labels, 1.0)
    probes = {"style": style_probe_logits(model, z_t, calib, z_c, rng),
              "content": content_probe_logits(model, z_t, noise_variances, rng)}
    variances, profiles, reliability = {}, {}, {}
    for name, sets in probes.items():
        var = metrics.prediction_variance(sets)
        variances[name] = var
        profiles[name] = metrics.variance_ece_profile(var, (conf, correct), group_count,
                                                      target.ids, R)
        low, high = metrics.extreme_quantiles(var, quantile, target.ids)
        reliability[(name, "bottom")] = metrics.reliability_table((conf[low], correct[low]), R)
        reliability[(name, "top")] = metrics.reliability_table((conf[high], correct[high]), R)
    return AnalysisBundle(target.ids, conf, correct, variances, profiles, reliability,
                          {k: v.shape[1] for k, v in probes.items()})


# --- benchmark -----------------------------------------------------------------------

def _interval(values):
    v = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(v))
    hw = 0.0 if len(v) < 2 else float(1.96 * np.std(v, ddof=1) / math.sqrt(len(v)))
    return mean, hw


def aggregate(rows, methods):
    """Mean and 95% half-width over seeds per (target, method), plus the
    average over targets per method."""
    out = []
    targets = sorted({r["target"] for r in rows})
    for method in methods:
        per_target = []
        for t in targets:
            cell = [r for r in rows if r["target"] == t and r["method"] == method and "error" not in r]
            if not cell:
                continue
            entry = {"target": t, "method": method, "n_seeds": len(cell)}
            for key in ("ece", "nll", "accuracy", "temperature"):
                entry[key], entry[key + "_hw"] = _interval([r[key] for r in cell])
            per_target.append(entry)
        out.extend(per_target)
        if per_target:
            out.append({"target": "avg", "method": method,
                        **{k: float(np.mean([e[k] for e in per_target]))
                           for k in ("ece", "nll", "accuracy", "temperature")}})
    return out


def _to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def load_or_generate(cfg, seed):
    if cfg.data_path:
        return load_dataset(cfg.data_path)
    return generate(derive_rng(seed, DATA), cfg.n_per_domain_class, cfg.generator)


def run_benchmark(cfg, progress=None):
    """Run every (target, seed) cell and assemble the report dictionary."""
    rows, cells, analysis = [], [], []
    for seed in cfg.seeds:
        data = load_or_generate(cfg, seed)
        for spec in cfg.split_specs():
            try:
                cell = run_cell(cfg, spec, seed, data)
            except (CalibError, ArithmeticError, ValueError) as exc:
                log.error("cell target=%s seed=%s failed: %s", spec.target_domain, seed, exc)
                cells.append({"target": spec.target_domain, "seed": seed,
                              "error": f"{type(exc).__name__}: {exc}"})
                continue
            rows.extend(cell["rows"])
            cells.append({"target": spec.target_domain, "seed": seed,
                          "train_size": cell["train_size"], "calib_size": cell["calib_size"],
                          "target_size": cell["target_size"],
                          "final_train_loss": cell["train_loss"][-1] if cell["train_loss"] else None})
            if "analysis" in cell:
                analysis.append({"target": spec.target_domain, "seed": seed,
                                 **cell["analysis"].summary()})
                if progress is not None:
                    progress(spec.target_domain, seed, cell)
            elif progress is not None:
                progress(spec.target_domain, seed, cell)
    order = {m: i for i, m in enumerate(cfg.methods)}
    rows.sort(key=lambda r: (r["target"], order[r["method"]], r["seed"]))
    report = {
        "config": cfg.to_dict(),
        "train_fraction": cfg.train_fraction,
        "rows": rows,
        "aggregates": aggregate(rows, cfg.methods),
        "cells": cells,
        "analysis": analysis,
    }
    if analysis:
        report["analysis_spearman_mean"] = {
            probe: float(np.nanmean([a[probe]["spearman"] for a in analysis]))
            for probe in ("style", "content")}
    return _to_jsonable(report)


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


def report_table(report):
    """Methods x target domains (+ Avg) of target ECE in percent, mean +- 95% half-width."""
    aggs = report["aggregates"]
    methods = list(dict.fromkeys(a["method"] for a in aggs))
    targets = sorted({a["target"] for a in aggs if a["target"] != "avg"})
    header = ["Method"] + [f"target d{t}" for t in targets] + ["Avg"]
    lines = []
    for m in methods:
        cells = [m]
        for t in targets:
            a = next((a for a in aggs if a["method"] == m and a["target"] == t), None)
            cells.append("-" if a is None else f"{100 * a['ece']:.2f} ± {100 * a['ece_hw']:.2f}")
        avg = next((a for a in aggs if a["method"] == m and a["target"] == "avg"), None)
        cells.append("-" if avg is None else f"{100 * avg['ece']:.2f}")
        lines.append(cells)
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    out = ["Target-domain ECE (%)", fmt(header), "-" * len(fmt(header))]
    out += [fmt(r) for r in lines]
    acc = [a for a in aggs if a["method"] == methods[0] and a["target"] != "avg"] if methods else []
    if acc:
        out.append("")
        out.append("Accuracy (all methods): " + ", ".join(
            f"d{a['target']}={100 * a['accuracy']:.2f}%" for a in acc))
    out.append(f"train_fraction={report['train_fraction']}")
    return "\n".join(out) + "\n"


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report_json(report))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report_table(report))
