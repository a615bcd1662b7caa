"""
Plots
=====

File based figures: forgetting curves of the seen domains, generalization curves on
the unseen pool and cosine-similarity heatmaps of the graph memory. Every figure is
written next to the CSV holding its data.

.. autofunction:: plot_forgetting_curves
.. autofunction:: plot_generalization
.. autofunction:: plot_similarity_heatmap

"""
from __future__ import print_function

import csv
import logging
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_forgetting_curves", "plot_generalization", "plot_similarity_heatmap"]

LOGGER = logging.getLogger("lreidpy")


def _write_curves_csv(path, curves):
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(["label", "domain", "step", "value"])
        for (label, domain), points in curves.items():
            for step, value in points:
                writer.writerow([label, domain, step, "%.6f" % value])


def plot_forgetting_curves(reports, path, metric="mAP"):
    """Plot the trajectory of every seen domain, one panel per domain, one line per report.

    Args:
        reports (:obj:`dict`): Label (e.g. method name) to :class:`.MetricsReport`.
        path (:obj:`str`): Image file to write; the data goes to the same name with ``.csv``.
        metric (:obj:`str`): ``mAP`` or ``rank1``.

    Returns:
        :obj:`str`: ``path``.
    """
    domains = []
    for report in reports.values():
        for domain in report.seen_domains:
            if domain not in domains:
                domains.append(domain)

    figure, axes = plt.subplots(1, max(1, len(domains)), figsize=(3.2 * max(1, len(domains)), 3), squeeze=False)
    curves = {}
    for axis, domain in zip(axes[0], domains):
        for label, report in reports.items():
            points = report.curve(domain, metric)
            if not points:
                continue
            curves[(label, domain)] = points
            steps, values = zip(*points)
            axis.plot(steps, values, marker="o", label=label)
        axis.set_title(domain)
        axis.set_xlabel("step")
        axis.set_ylim(0, 1)
    axes[0][0].set_ylabel(metric)
    axes[0][-1].legend(loc="best", fontsize="small")
    figure.tight_layout()
    figure.savefig(path)
    plt.close(figure)

    _write_curves_csv(os.path.splitext(path)[0] + ".csv", curves)
    LOGGER.info("Wrote forgetting curves to %s", path)
    return path


def plot_generalization(reports, path, metric="mAP"):
    """Plot the unseen-pool metric over the domain steps, one line per report."""
    figure, axis = plt.subplots(figsize=(4, 3))
    curves = {}
    for label, report in reports.items():
        for domain in report.unseen_domains:
            points = report.curve(domain, metric)
            curves[(label, domain)] = points
            steps, values = zip(*points)
            axis.plot(steps, values, marker="o", label=label)
    axis.set_xlabel("step")
    axis.set_ylabel(metric)
    axis.set_ylim(0, 1)
    if curves:
        axis.legend(loc="best", fontsize="small")
    figure.tight_layout()
    figure.savefig(path)
    plt.close(figure)

    _write_curves_csv(os.path.splitext(path)[0] + ".csv", curves)
    LOGGER.info("Wrote generalization curves to %s", path)
    return path


def plot_similarity_heatmap(matrix, path, title=None):
    """Render a cosine-similarity matrix with a fixed ``[-1, 1]`` color range."""
    matrix = np.asarray(matrix, dtype=float)
    figure, axis = plt.subplots(figsize=(4, 3.5))
    image = axis.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="coolwarm")
    figure.colorbar(image, ax=axis)
    axis.set_xlabel("propagated")
    axis.set_ylabel("extracted")
    if title:
        axis.set_title(title)
    figure.tight_layout()
    figure.savefig(path)
    plt.close(figure)
    return path
