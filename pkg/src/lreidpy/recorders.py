"""
Recorders
=========

Listeners that persist what a :class:`.Trainer` emits: per-iteration losses, per-step
retrieval metrics and graph memory diagnostics. Files are written incrementally so a
run that aborts keeps everything recorded up to that point.

.. autoclass:: LossRecorder
   :members:
.. autoclass:: MetricsRecorder
   :members:
.. autoclass:: DiagnosticsRecorder
   :members:

"""
from __future__ import print_function

import csv
import logging
import os

import numpy as np

from .evaluation import CSV_COLUMNS, aggregate_rows
from .graph import cosine_similarity_matrix

__all__ = ["DiagnosticsRecorder", "LossRecorder", "MetricsRecorder"]

LOGGER = logging.getLogger("lreidpy")

LOSS_COLUMNS = ("step", "epoch", "iteration", "L_c", "L_d", "L_p", "L_s", "L_total")
DIAGNOSTICS_FOLDER = "diagnostics"


class _CsvRecorder(object):
    columns = ()

    def __init__(self, path):
        self.path = path
        folder = os.path.dirname(path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        with open(self.path, "w", newline="") as stream:
            csv.writer(stream).writerow(self.columns)

    def write_row(self, values):
        with open(self.path, "a", newline="") as stream:
            csv.writer(stream).writerow([_format(values[column]) for column in self.columns])


def _dump(path, matrix):
    np.savetxt(path, matrix.detach().cpu().numpy(), delimiter=",", fmt="%.6f")


def _format(value):
    if isinstance(value, float):
        return "%.6f" % value
    return value


class LossRecorder(_CsvRecorder):
    """Appends one row per optimizer step to ``losses.csv``.

    Args:
        trainer (:class:`.Trainer`): Trainer to listen to.
        path (:obj:`str`): CSV file to create.
    """

    columns = LOSS_COLUMNS

    def __init__(self, trainer, path):
        super(LossRecorder, self).__init__(path)
        trainer.on("iteration", self.on_iteration)

    def on_iteration(self, record):
        self.write_row(record)


class MetricsRecorder(_CsvRecorder):
    """Appends evaluation results to ``metrics.csv`` and the final ``s̄``/``ū`` rows.

    Args:
        trainer (:class:`.Trainer`): Trainer to listen to.
        path (:obj:`str`): CSV file to create.
    """

    columns = CSV_COLUMNS

    def __init__(self, trainer, path):
        super(MetricsRecorder, self).__init__(path)
        trainer.on("evaluated", self.on_evaluated)
        trainer.on("finished", self.on_finished)

    def on_evaluated(self, step, domain, split, metrics):
        self.write_row(dict(step=step, domain=domain, split=split, mAP=metrics["mAP"], rank1=metrics["rank1"]))

    def on_finished(self, report):
        if len(report):
            for row in aggregate_rows(report):
                self.write_row(row)
        LOGGER.info("Metrics written to %s", self.path)


class DiagnosticsRecorder(object):
    """Dumps the cross-graph weights ``A^C`` and the cosine similarity between ``V^S``
    and ``V̄^S`` of the last batch of every epoch.

    Files are written to ``{root}/step_{t}/epoch_{e}_cross.csv`` and
    ``{root}/step_{t}/epoch_{e}_similarity.csv``.
    """

    def __init__(self, trainer, root):
        self.root = root
        os.makedirs(root, exist_ok=True)
        trainer.on("epoch_end", self.on_epoch_end)

    def on_epoch_end(self, step, epoch, enhanced):
        folder = os.path.join(self.root, "step_%d" % step)
        os.makedirs(folder, exist_ok=True)
        similarity = cosine_similarity_matrix(enhanced.features, enhanced.propagated)
        _dump(os.path.join(folder, "epoch_%d_similarity.csv" % epoch), similarity)
        if enhanced.cross is not None:
            _dump(os.path.join(folder, "epoch_%d_cross.csv" % epoch), enhanced.cross)
