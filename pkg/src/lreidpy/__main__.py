import csv
import glob
import json
import logging
import os
import re
import sys
from collections import OrderedDict

import numpy as np

from .config import ExperimentConfig, resolve_output_path
from .core import ConfigurationError, DatasetParseError, LReIDError
from .data import ingest_directory
from .evaluation import UNSEEN, MetricsReport, aggregate, evaluate_domains
from .plots import plot_forgetting_curves, plot_generalization, plot_similarity_heatmap
from .recorders import DIAGNOSTICS_FOLDER, DiagnosticsRecorder, LossRecorder, MetricsRecorder
from .trainer import METHODS, TrainConfig, make_baseline, read_checkpoint

LOGGER = logging.getLogger("lreidpy")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s %(levelname)8s: %(message)s"


class UsageError(LReIDError):
    """Invalid command-line input; maps to exit code 2."""

    pass


def _load_config(config_path, out=None, seed=None, method=None, order=None, overrides=(), **kwargs):
    config = ExperimentConfig.load(config_path, overrides)
    if out is not None:
        config.output_dir = out
    if seed is not None:
        config.seed = seed
        config.train.seed = seed
        config.stream.synthetic.seed = seed
    if method is not None:
        config.method = method
    if order is not None:
        config.stream.order = order
    return config


def cmd_run(config, out=None, seed=None, method=None, order=None, overrides=(), **kwargs):
    """Train a full domain stream and write config, checkpoints, losses and metrics."""
    config = _load_config(config, out, seed, method, order, overrides)
    output_dir = config.resolved_output_dir
    os.makedirs(output_dir, exist_ok=True)
    config.save(os.path.join(output_dir, "config.json"))

    stream, unseen = config.stream.build()
    trainer = make_baseline(config.method, config.train, stream.domains[0].input_shape)
    if config.resume_from:
        trainer.load_checkpoint(config.resume_from)

    MetricsRecorder(trainer, os.path.join(output_dir, "metrics.csv"))
    LossRecorder(trainer, os.path.join(output_dir, "losses.csv"))
    if config.diagnostics:
        DiagnosticsRecorder(trainer, os.path.join(output_dir, DIAGNOSTICS_FOLDER))

    report = trainer.run_stream(stream, unseen, output_dir)

    reports = {config.method: report}
    plot_forgetting_curves(reports, os.path.join(output_dir, "forgetting.png"))
    if report.unseen_domains:
        plot_generalization(reports, os.path.join(output_dir, "generalization.png"))
    return EXIT_OK


def _load_run(run_dir):
    metrics = os.path.join(run_dir, "metrics.csv")
    if not os.path.isfile(metrics):
        raise UsageError("%s holds no metrics.csv" % run_dir)
    report = MetricsReport.read_csv(metrics)
    if not len(report):
        raise UsageError("%s holds an empty metrics.csv" % run_dir)

    label = os.path.basename(os.path.normpath(run_dir))
    config_path = os.path.join(run_dir, "config.json")
    if os.path.isfile(config_path):
        with open(config_path, "r") as stream:
            label = json.load(stream).get("method", label)
    return label, report


def _mean_report(reports):
    merged = MetricsReport()
    first = reports[0]
    for step in first.steps:
        for domain in first.seen_domains + first.unseen_domains:
            values = [report.get(step, domain) for report in reports]
            means = {k: float(np.mean([v[k] for v in values])) for k in ("mAP", "rank1")}
            merged.add(step, domain, first.split_of(domain), means)
    return merged


def _mean_std(values):
    return float(np.mean(values)), float(np.std(values))


def cmd_compare(runs, out="compare", **kwargs):
    """Tabulate several runs per method (mean and std over seeds) and plot their curves."""
    grouped = OrderedDict()
    for run_dir in runs:
        label, report = _load_run(run_dir)
        grouped.setdefault(label, []).append(report)

    signatures = set()
    for reports in grouped.values():
        for report in reports:
            signatures.add((tuple(report.seen_domains), tuple(report.unseen_domains), tuple(report.steps)))
    if len(signatures) != 1:
        raise UsageError("Runs were evaluated on different domains or steps and cannot be compared")
    seen, unseen, _ = signatures.pop()

    header = ["method", "runs"]
    for domain in seen:
        header += ["%s_mAP" % domain, "%s_rank1" % domain]
    header += ["s_bar_mAP", "s_bar_rank1"]
    if unseen:
        header += ["u_bar_mAP", "u_bar_rank1"]

    rows = []
    for label, reports in grouped.items():
        row = [label, str(len(reports))]
        for domain in seen:
            for metric in ("mAP", "rank1"):
                row.append("%.4f±%.4f" % _mean_std([r.get(r.final_step, domain)[metric] for r in reports]))
        summaries = [aggregate(r) for r in reports]
        for split in ("seen", UNSEEN) if unseen else ("seen",):
            for metric in ("mAP", "rank1"):
                row.append("%.4f±%.4f" % _mean_std([s[split][metric] for s in summaries]))
        rows.append(row)

    out = resolve_output_path(out)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "compare.csv"), "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(header)
        writer.writerows(rows)

    widths = [max(len(header[i]), max(len(r[i]) for r in rows)) for i in range(len(header))]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))

    means = OrderedDict((label, _mean_report(reports)) for label, reports in grouped.items())
    for metric in ("mAP", "rank1"):
        plot_forgetting_curves(means, os.path.join(out, "forgetting_%s.png" % metric), metric)
        if unseen:
            plot_generalization(means, os.path.join(out, "generalization_%s.png" % metric), metric)
    return EXIT_OK


def _epoch_of(path):
    return int(re.search(r"epoch_(\d+)_", os.path.basename(path)).group(1))


def cmd_diagnose(run, out=None, **kwargs):
    """Render the V^S / V̄^S cosine-similarity heatmap of the last epoch of every domain step."""
    root = os.path.join(run, DIAGNOSTICS_FOLDER)
    steps = sorted(glob.glob(os.path.join(root, "step_*")), key=lambda p: int(p.rsplit("_", 1)[1]))
    if not steps:
        raise UsageError("No diagnostic dumps in %s; run with \"diagnostics\": true" % run)

    out = resolve_output_path(out) if out else run
    os.makedirs(out, exist_ok=True)
    trend = []
    for folder in steps:
        step = int(folder.rsplit("_", 1)[1])
        dumps = sorted(glob.glob(os.path.join(folder, "epoch_*_similarity.csv")), key=_epoch_of)
        if not dumps:
            raise UsageError("Diagnostic folder %s is empty" % folder)
        for dump in dumps:
            matrix = np.atleast_2d(np.loadtxt(dump, delimiter=","))
            trend.append((step, _epoch_of(dump), float(np.mean(np.diag(matrix)))))
        last = np.atleast_2d(np.loadtxt(dumps[-1], delimiter=","))
        path = os.path.join(out, "heatmap_step_%d.png" % step)
        plot_similarity_heatmap(last, path, title="step %d" % step)
        LOGGER.info("Wrote %s", path)

    with open(os.path.join(out, "similarity_trend.csv"), "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(["step", "epoch", "mean_self_similarity"])
        writer.writerows((step, epoch, "%.6f" % value) for step, epoch, value in trend)
    return EXIT_OK


def cmd_eval(checkpoint, data=None, layout="csv", config=None, **kwargs):
    """Evaluate a stored checkpoint on an ingested dataset or on a configured stream."""
    content = read_checkpoint(checkpoint)
    metadata = content["metadata"]
    train_config = TrainConfig.from_dict(metadata["config"])
    trainer = make_baseline(metadata["method"], train_config, metadata["input_shape"])
    trainer.load_checkpoint(checkpoint)

    if data is not None:
        datasets = [ingest_directory(data, layout)]
    elif config is not None:
        stream, unseen = ExperimentConfig.load(config).stream.build()
        datasets = list(stream.domains) + ([unseen] if unseen is not None else [])
    else:
        raise UsageError("Either --data or --config is required")

    trainer.backbone.eval()
    if trainer.graph is not None:
        trainer.graph.eval()
    results = evaluate_domains(datasets, trainer.encode, train_config.eval_ranks, train_config.eval_workers)
    print(json.dumps(OrderedDict((d.name, r) for d, r in zip(datasets, results)), indent=2))
    return EXIT_OK


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(prog="lreidpy", description="Lifelong person re-identification experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")

    commands = parser.add_subparsers(help="commands")
    commands.dest = "command"
    commands.required = True

    # Command: run
    run_parser = commands.add_parser("run", help="Train and evaluate a domain stream")
    run_parser.add_argument("--config", required=True, help="JSON experiment config")
    run_parser.add_argument("--out", help="Output folder")
    run_parser.add_argument("--seed", type=int, help="Random seed")
    run_parser.add_argument("--method", choices=METHODS, help="Method variant")
    run_parser.add_argument("--order", help="Domain order: order-1, order-2 or comma separated indices")
    run_parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override a config key"
    )
    run_parser.set_defaults(func=cmd_run)

    # Command: compare
    compare_parser = commands.add_parser("compare", help="Compare finished runs")
    compare_parser.add_argument("runs", nargs="+", help="Run folders")
    compare_parser.add_argument("--out", default="compare", help="Output folder")
    compare_parser.set_defaults(func=cmd_compare)

    # Command: diagnose
    diagnose_parser = commands.add_parser("diagnose", help="Render graph memory diagnostics of a run")
    diagnose_parser.add_argument("run", help="Run folder")
    diagnose_parser.add_argument("--out", help="Output folder, defaults to the run folder")
    diagnose_parser.set_defaults(func=cmd_diagnose)

    # Command: eval
    eval_parser = commands.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("checkpoint", help="Checkpoint file")
    eval_parser.add_argument("--data", help="Dataset folder")
    eval_parser.add_argument("--layout", default="csv", choices=("csv", "images"), help="Dataset folder layout")
    eval_parser.add_argument("--config", help="Experiment config whose test sets are evaluated")
    eval_parser.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format=LOG_FORMAT, level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        return args.func(**vars(args))
    except (UsageError, ConfigurationError, DatasetParseError) as error:
        LOGGER.error("%s", error)
        return EXIT_USAGE
    except Exception:
        LOGGER.exception("Command %s failed", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
