"""Command line entry point: ``calib <subcommand>``.

Exit codes: 0 success, 2 configuration/input error, 3 numeric error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import calibration as cal
from . import harness, metrics
from .datagen import SplitSpec, generate, load_dataset, save_dataset, split
from .errors import CalibError, ConfigError, NumericError
from .model import SmallCnn, TrainConfig, train
from .numerics import derive_rng, make_rng

log = logging.getLogger("ctscal")


def _config(args):
    if getattr(args, "config", None):
        return harness.ExperimentConfig.load(args.config)
    return harness.ExperimentConfig()


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _split_for(args, cfg, data):
    if cfg.splits:
        spec = cfg.splits[0]
        return SplitSpec(spec.train_domains, spec.calib_domains, spec.target_domain,
                         spec.train_fraction, args.seed)
    n_domains = int(data.domains.max()) + 1
    return SplitSpec.leave_out(args.target, n_domains, cfg.train_fraction, args.seed)


def cmd_gen_data(args):
    cfg = _config(args)
    n = args.n_per_cell or cfg.n_per_domain_class
    data = generate(make_rng(args.seed), n, cfg.generator)
    save_dataset(data, args.out, cfg.generator, args.seed, n)
    log.info("wrote %d images to %s", len(data), args.out)


def cmd_train(args):
    cfg = _config(args)
    data = load_dataset(args.data)
    train_set, _, _ = split(data, _split_for(args, cfg, data))
    tc = cfg.train
    tc = TrainConfig(args.lr if args.lr is not None else tc.lr, tc.batch_size,
                     args.epochs if args.epochs is not None else tc.epochs)
    n_classes = int(data.labels.max()) + 1
    model = SmallCnn.init(n_classes, derive_rng(args.seed, harness.INIT), cfg.style_layer)
    model, trace = train(model, train_set.pixels, train_set.labels, tc,
                         derive_rng(args.seed, harness.TRAIN), seed=args.seed)
    model.save(args.out)
    log.info("final epoch loss %.4f", trace[-1] if trace else float("nan"))


def cmd_export_logits(args):
    cfg = _config(args)
    data = load_dataset(args.data)
    model = SmallCnn.load(args.model)
    _, calib, target = split(data, _split_for(args, cfg, data))
    part = calib if args.split == "calib" else target
    pairings = args.pairings or cfg.pairings
    batch = harness.build_logit_cache(model, part, args.seed, pairings,
                                      cfg.cross_domain_pairs, cfg.same_class_style)
    harness.write_cache(batch, args.out)
    log.info("wrote %d records to %s", len(batch), args.out)


def cmd_calibrate(args):
    batch = harness.read_cache(args.logits)
    method = args.method
    if method == "ccdg-nn":
        table = cal.ccdg_nn_build(batch)
        _write_json({"method": "ccdg-nn", "domains": table.domains,
                     "centroids": table.centroids.tolist(),
                     "temperatures": table.temperatures.tolist()}, args.out)
        return
    if method == "perturb-ts":
        if not (args.model and args.data):
            raise ConfigError("perturb-ts needs --model and --data to recompute logits")
        cfg = _config(args)
        data = load_dataset(args.data)
        _, calib, _ = split(data, _split_for(args, cfg, data))
        temp = cal.perturb_ts(calib.pixels, calib.labels, SmallCnn.load(args.model),
                              cfg.perturb_severities, derive_rng(args.seed, harness.PERTURB))
    elif method == "vanilla":
        temp = cal.Temperature(1.0, "vanilla", cal.nll_loss(batch, 1.0))
    elif method == "ts":
        temp = cal.optimize_temperature(batch.unique_samples(), None)
    elif method == "classwise":
        temp = cal.optimize_classwise(batch)
    else:
        weights = None
        if not args.lambda_grid:
            l1 = 1.0 if args.lambda1 is None else args.lambda1
            l2 = 1.0 if args.lambda2 is None else args.lambda2
            weights = {"cts": cal.LossWeights(l1, l2), "cts-s": cal.LossWeights(l1, 0.0),
                       "cts-c": cal.LossWeights(0.0, l2)}[method]
        temp = cal.fit_cts(batch, method, weights, args.lambda_grid, seed=args.seed)
    out = temp.to_dict()
    out.pop("lambda_scores", None)
    _write_json(out, args.out)


def _temperatures_for(doc, logits):
    if doc.get("method") == "ccdg-nn":
        table = cal.ClusterTable(doc["domains"], np.asarray(doc["centroids"]),
                                 np.asarray(doc["temperatures"]))
        return cal.ccdg_nn_assign(table, logits)
    return float(doc["value"])


def cmd_evaluate(args):
    batch = harness.read_cache(args.logits).unique_samples()
    if args.temperature:
        with open(args.temperature) as fh:
            doc = json.load(fh)
    else:
        doc = {"method": "vanilla", "value": 1.0}
    T = _temperatures_for(doc, batch.logits)
    conf, correct = metrics.confidences(batch.logits, batch.labels, T)
    table = metrics.reliability_table((conf, correct), args.bins)
    report = {
        "method": doc.get("method"),
        "temperature": float(np.mean(T)),
        "ece": table.ece(),
        "nll": metrics.nll(batch.logits, batch.labels, T),
        "accuracy": metrics.accuracy(batch.logits, batch.labels),
        "n": len(batch),
        "bins": [{"bin_low": r.low, "bin_high": r.high, "count": r.count,
                  "confidence": None if r.count == 0 else r.confidence,
                  "accuracy": None if r.count == 0 else r.accuracy} for r in table.rows],
    }
    _write_json(report, args.out)


def cmd_analyze(args):
    cfg = _config(args)
    data = load_dataset(args.data)
    model = SmallCnn.load(args.model)
    _, calib, target = split(data, _split_for(args, cfg, data))
    bundle = harness.run_consistency_analysis(
        model, calib, target, cfg.noise_variances, derive_rng(args.seed, harness.ANALYSIS),
        args.groups or cfg.group_count, args.quantile, cfg.bins)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "samples.csv"), "w") as fh:
        fh.write(bundle.sample_csv())
    with open(os.path.join(args.out, "profile.csv"), "w") as fh:
        fh.write(bundle.profile_csv())
    for (probe, end), table in bundle.reliability.items():
        with open(os.path.join(args.out, f"reliability_{probe}_{end}.csv"), "w") as fh:
            fh.write(table.to_csv())
    _write_json(bundle.summary(), os.path.join(args.out, "summary.json"))


def cmd_run_all(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    out = args.out or cfg.output_dir
    report = harness.run_benchmark(
        cfg, progress=lambda t, s, c: log.info("finished target=%s seed=%s", t, s))
    harness.write_report(report, out)
    print(harness.report_table(report), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="calib", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help, seed_default=0):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic multi-domain dataset")
    sp.add_argument("--n-per-cell", type=int, help="images per (domain, class)")

    for name, func, help in (("train", cmd_train, "train the CNN on the source split"),
                             ("export-logits", cmd_export_logits, "write a logit cache"),
                             ("analyze", cmd_analyze, "prediction-consistency analysis")):
        sp = add(name, func, help)
        sp.add_argument("--data", required=True)
        sp.add_argument("--target", type=int, default=3, help="leave-out domain")
        if name == "train":
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--lr", type=float)
        else:
            sp.add_argument("--model", required=True)
        if name == "export-logits":
            sp.add_argument("--split", choices=("calib", "target"), default="calib")
            sp.add_argument("--pairings", type=int)
        if name == "analyze":
            sp.add_argument("--quantile", type=float, default=0.05,
                            help="fraction for the top/bottom reliability tables")
            sp.add_argument("--groups", type=int)

    sp = add("calibrate", cmd_calibrate, "fit a temperature on a logit cache")
    sp.add_argument("--logits", required=True)
    sp.add_argument("--method", required=True, choices=cal.METHODS)
    sp.add_argument("--lambda1", type=float)
    sp.add_argument("--lambda2", type=float)
    sp.add_argument("--lambda-grid", action="store_true",
                    help="choose lambdas by held-out ECE instead of --lambda1/--lambda2")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--target", type=int, default=3)

    sp = add("evaluate", cmd_evaluate, "score a temperature on a logit file")
    sp.add_argument("--logits", required=True)
    sp.add_argument("--temperature", help="JSON written by `calibrate`; default T=1")
    sp.add_argument("--bins", type=int, default=10)

    add("run-all", cmd_run_all, "full leave-one-domain-out benchmark", seed_default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (CalibError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
