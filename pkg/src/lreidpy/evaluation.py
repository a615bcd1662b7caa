"""
Evaluation
==========

Retrieval evaluation by Euclidean distance of embeddings: mean average precision and
CMC rank-k accuracy per domain, the seen/unseen aggregates ``s̄`` and ``ū``, and
forgetting curves over the domain steps.

.. autoclass:: RetrievalTask
   :members:
.. autoclass:: MetricsReport
   :members:
.. autofunction:: rank_gallery
.. autofunction:: average_precision
.. autofunction:: evaluate_task
.. autofunction:: aggregate

"""
from __future__ import print_function

import csv
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .core import EvaluationError, ProtocolError

__all__ = [
    "MetricsReport",
    "RetrievalTask",
    "aggregate",
    "average_precision",
    "build_task",
    "evaluate_domains",
    "evaluate_task",
    "rank_gallery",
]

LOGGER = logging.getLogger("lreidpy")

METRICS = ("mAP", "rank1")
SEEN = "seen"
UNSEEN = "unseen"
CSV_COLUMNS = ("step", "domain", "split", "mAP", "rank1")
FINAL_STEP = "final"


@dataclass
class RetrievalTask(object):
    """Query and gallery embeddings of one test set.

    Attributes:
        query_features (:obj:`numpy.ndarray`): ``(Q, d)`` query embeddings.
        query_labels (:obj:`numpy.ndarray`): ``(Q,)`` identities.
        gallery_features (:obj:`numpy.ndarray`): ``(G, d)`` gallery embeddings.
        gallery_labels (:obj:`numpy.ndarray`): ``(G,)`` identities.
        query_cameras (:obj:`numpy.ndarray`): Optional camera ids of the queries.
        gallery_cameras (:obj:`numpy.ndarray`): Optional camera ids of the gallery.
    """

    query_features: np.ndarray
    query_labels: np.ndarray
    gallery_features: np.ndarray
    gallery_labels: np.ndarray
    query_cameras: np.ndarray = None
    gallery_cameras: np.ndarray = None

    def __post_init__(self):
        self.query_features = np.asarray(self.query_features, dtype=np.float64)
        self.gallery_features = np.asarray(self.gallery_features, dtype=np.float64)
        self.query_labels = np.asarray(self.query_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        if self.query_cameras is not None:
            self.query_cameras = np.asarray(self.query_cameras)
        if self.gallery_cameras is not None:
            self.gallery_cameras = np.asarray(self.gallery_cameras)

    @property
    def uses_cameras(self):
        return self.query_cameras is not None and self.gallery_cameras is not None


def rank_gallery(query, gallery):
    """Order gallery indices by ascending Euclidean distance to ``query``.

    Exact ties keep the lower gallery index first.

    Returns:
        :obj:`numpy.ndarray` of gallery indices.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError("Cannot rank an empty gallery")
    if gallery.shape[1] != query.shape[-1]:
        raise ValueError("Query width %d does not match gallery width %d" % (query.shape[-1], gallery.shape[1]))
    distances = np.square(gallery - query).sum(axis=1)
    return np.argsort(distances, kind="stable")


def average_precision(relevant):
    """Average precision of a ranked list of relevance flags.

    Precision is averaged at the ranks of the relevant items, without interpolation.

    Raises:
        ValueError: If no item is relevant.
    """
    relevant = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(relevant)
    if hits.size == 0:
        raise ValueError("Average precision needs at least one relevant item")
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1.0)
    return float(precision_at_hits.mean())


def evaluate_task(task, ranks=(1,)):
    """Compute mAP and CMC accuracy of a retrieval task.

    Gallery items sharing identity *and* camera with the query are removed when camera
    ids exist. Queries without any remaining match are dropped and counted.

    Args:
        task (:class:`RetrievalTask`): Embeddings of a frozen model.
        ranks (:obj:`tuple`): CMC ranks to report; ``rank1`` is always included.

    Returns:
        :obj:`dict` with ``mAP``, ``rank{k}`` for every requested rank, ``valid_queries``
        and ``dropped_queries``.

    Raises:
        EvaluationError: If no query is valid.
    """
    ranks = sorted(set(int(k) for k in ranks) | {1})
    precisions = []
    hits = {k: 0 for k in ranks}
    dropped = 0

    for index in range(len(task.query_labels)):
        order = rank_gallery(task.query_features[index], task.gallery_features)
        matches = task.gallery_labels[order] == task.query_labels[index]
        if task.uses_cameras:
            same_camera = task.gallery_cameras[order] == task.query_cameras[index]
            matches = matches[~(matches & same_camera)]
        if not matches.any():
            dropped += 1
            continue
        precisions.append(average_precision(matches))
        first_hit = int(np.argmax(matches))
        for k in ranks:
            if first_hit < k:
                hits[k] += 1

    if not precisions:
        raise EvaluationError("No query has a valid match in the gallery")
    if dropped:
        LOGGER.warning("Dropped %d queries without a valid gallery match", dropped)

    result = OrderedDict(mAP=float(np.mean(precisions)))
    for k in ranks:
        result["rank%d" % k] = hits[k] / float(len(precisions))
    result["valid_queries"] = len(precisions)
    result["dropped_queries"] = dropped
    return result


def _embed(encoder, inputs, batch_size):
    chunks = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            chunks.append(encoder(inputs[start : start + batch_size]).double().cpu())
    return torch.cat(chunks).numpy()


def build_task(dataset, encoder, batch_size=256):
    """Embed the query and gallery splits of ``dataset`` with ``encoder``.

    Args:
        dataset (:class:`.DomainDataset`): Domain whose test splits are embedded.
        encoder (:obj:`callable`): Maps an input batch to an embedding matrix.

    Returns:
        :class:`RetrievalTask`
    """
    query_x, query_y, query_cam = dataset.query
    gallery_x, gallery_y, gallery_cam = dataset.gallery
    if len(gallery_y) == 0:
        raise EvaluationError("Domain %s has an empty gallery" % dataset.name)
    return RetrievalTask(
        _embed(encoder, query_x, batch_size),
        query_y.numpy(),
        _embed(encoder, gallery_x, batch_size),
        gallery_y.numpy(),
        None if query_cam is None else query_cam.numpy(),
        None if gallery_cam is None else gallery_cam.numpy(),
    )


def evaluate_domains(datasets, encoder, ranks=(1,), workers=1):
    """Evaluate several test domains against one frozen encoder.

    Domains are evaluated concurrently when ``workers > 1``; results come back in the
    order of ``datasets``.

    Returns:
        :obj:`list` of metric dictionaries.
    """

    def run(dataset):
        return evaluate_task(build_task(dataset, encoder), ranks=ranks)

    if workers <= 1 or len(datasets) <= 1:
        return [run(dataset) for dataset in datasets]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, datasets))


class MetricsReport(object):
    """Retrieval metrics per domain step and test domain.

    Entries are keyed by ``(step, domain)``; each holds the split (``seen`` or ``unseen``)
    and the metric values. Seen domains are the training stream's test sets in stream
    order; unseen domains are held out from training.
    """

    def __init__(self):
        self._entries = OrderedDict()
        self._splits = OrderedDict()

    def add(self, step, domain, split, metrics):
        """Record ``metrics`` for ``domain`` after domain step ``step``."""
        if split not in (SEEN, UNSEEN):
            raise ValueError("Split must be %r or %r, got %r" % (SEEN, UNSEEN, split))
        for name in METRICS:
            value = float(metrics[name])
            if not 0.0 <= value <= 1.0:
                raise EvaluationError("Metric %s=%r of %s is outside [0, 1]" % (name, value, domain))
        self._splits.setdefault(domain, split)
        self._entries[(int(step), domain)] = OrderedDict((name, float(metrics[name])) for name in METRICS)

    def get(self, step, domain):
        try:
            return self._entries[(int(step), domain)]
        except KeyError:
            raise ProtocolError("No metrics for domain %s at step %s" % (domain, step))

    @property
    def steps(self):
        return sorted(set(step for step, _ in self._entries))

    @property
    def final_step(self):
        steps = self.steps
        if not steps:
            raise ProtocolError("The report is empty")
        return steps[-1]

    @property
    def seen_domains(self):
        return [domain for domain, split in self._splits.items() if split == SEEN]

    @property
    def unseen_domains(self):
        return [domain for domain, split in self._splits.items() if split == UNSEEN]

    def split_of(self, domain):
        return self._splits[domain]

    def curve(self, domain, metric="mAP"):
        """Metric trajectory of ``domain`` over all steps, as ``[(step, value), ...]``."""
        return [(step, values[metric]) for (step, name), values in self._entries.items() if name == domain]

    def forgetting(self, domain, learned_step, metric="mAP"):
        """Degradation of ``domain`` from the step it was learned to the final step.

        Returns:
            :obj:`float`: Absolute metric drop; negative values mean the domain improved.
        """
        return self.get(learned_step, domain)[metric] - self.get(self.final_step, domain)[metric]

    def matrix(self, metric="mAP"):
        """Steps x domains array of ``metric``, with domains ordered seen first then unseen."""
        domains = self.seen_domains + self.unseen_domains
        return np.array([[self.get(step, domain)[metric] for domain in domains] for step in self.steps])

    def __len__(self):
        return len(self._entries)

    def rows(self):
        for (step, domain), values in self._entries.items():
            yield OrderedDict(
                [("step", step), ("domain", domain), ("split", self._splits[domain])] + list(values.items())
            )

    def write_csv(self, path, include_aggregates=True):
        """Write ``metrics.csv``: one row per entry, then the ``s_bar``/``u_bar`` rows of the final step."""
        with open(path, "w", newline="") as stream:
            writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow(_format_row(row))
            if include_aggregates and len(self):
                for row in aggregate_rows(self):
                    writer.writerow(_format_row(row))
        return path

    @classmethod
    def read_csv(cls, path):
        """Load a report written by :meth:`write_csv`; aggregate rows are skipped."""
        report = cls()
        with open(path, "r", newline="") as stream:
            for row in csv.DictReader(stream):
                if row["step"] == FINAL_STEP:
                    continue
                report.add(int(row["step"]), row["domain"], row["split"], row)
        return report


def _format_row(row):
    return {key: ("%.6f" % value if isinstance(value, float) else value) for key, value in row.items()}


def aggregate(report, seen_domains=None, unseen_domains=None, step=None):
    """Average metrics over seen and unseen domains at ``step`` (default: the final step).

    Returns:
        :obj:`dict`: ``{"seen": {"mAP": s̄, "rank1": ...}, "unseen": {...}}``. A group without
        domains is omitted.

    Raises:
        ProtocolError: If an entry for a listed domain is missing.
    """
    step = report.final_step if step is None else step
    seen_domains = report.seen_domains if seen_domains is None else list(seen_domains)
    unseen_domains = report.unseen_domains if unseen_domains is None else list(unseen_domains)

    result = OrderedDict()
    for split, domains in ((SEEN, seen_domains), (UNSEEN, unseen_domains)):
        if not domains:
            continue
        values = [report.get(step, domain) for domain in domains]
        result[split] = OrderedDict((name, float(np.mean([v[name] for v in values]))) for name in METRICS)
    return result


def aggregate_rows(report):
    names = {SEEN: "s_bar", UNSEEN: "u_bar"}
    for split, values in aggregate(report).items():
        yield OrderedDict([("step", FINAL_STEP), ("domain", names[split]), ("split", split)] + list(values.items()))
