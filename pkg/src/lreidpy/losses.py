"""
Losses
======

Training objectives of the lifelong learner:

* classification (cross-entropy over all classes seen so far),
* distillation from the previous model over the old classes,
* plasticity: a softplus triplet objective over aggregated features with batch-hard mining,
* stability: a softplus penalty on knowledge vertex movement,

and their weighted combinations.

.. autoclass:: LossWeights
   :members:
.. autoclass:: TripletIndex
.. autofunction:: cross_entropy
.. autofunction:: distillation
.. autofunction:: base_loss
.. autofunction:: mine_triplets
.. autofunction:: plasticity_loss
.. autofunction:: stability_loss
.. autofunction:: total_loss

"""
from __future__ import print_function

import logging
from collections import namedtuple
from dataclasses import asdict, dataclass

import torch
from torch.nn import functional as F

from .core import ConfigurationError
from .graph import pairwise_squared_distances

__all__ = [
    "LossWeights",
    "TripletIndex",
    "base_loss",
    "cross_entropy",
    "distillation",
    "mine_triplets",
    "plasticity_loss",
    "stability_loss",
    "total_loss",
]

LOGGER = logging.getLogger("lreidpy")

TripletIndex = namedtuple("TripletIndex", ["anchor", "positive", "negative"])


@dataclass
class LossWeights(object):
    """Trade-off factors of the training objective.

    Attributes:
        distillation (:obj:`float`): ``γ``, weight of the distillation loss.
        plasticity (:obj:`float`): ``λ_p``, weight of the plasticity loss.
        stability (:obj:`float`): ``λ_s``, weight of the stability loss. The hyper-parameter
            search also reports ``5e-4`` as a good balance; ``10`` is the training default.
    """

    distillation: float = 1.0
    plasticity: float = 1.0
    stability: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ConfigurationError("Loss weight %s must be non-negative, got %r" % (name, value))


def cross_entropy(logits, labels):
    """Batch mean of ``-log softmax(logits)[label]``.

    Raises:
        ValueError: If a label falls outside ``[0, C)``.
    """
    num_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError("Labels must lie in [0, %d), got range [%d, %d]" % (num_classes, labels.min(), labels.max()))
    return F.cross_entropy(logits, labels)


def distillation(new_logits, old_logits, n_old):
    """Knowledge distillation over the first ``n_old`` classes.

    ``L_d = -sum_j softmax(old)_j log softmax(new)_j``, averaged over the batch. Both
    softmaxes only see the old-class columns.

    Raises:
        ValueError: If ``n_old`` is zero; distillation has to be skipped on the first domain.
    """
    if n_old < 1:
        raise ValueError("Distillation needs at least one old class; skip it on the first domain")
    if new_logits.shape[1] < n_old or old_logits.shape[1] < n_old:
        raise ConfigurationError(
            "Logits of width %d and %d cannot cover %d old classes" % (new_logits.shape[1], old_logits.shape[1], n_old)
        )
    targets = F.softmax(old_logits[:, :n_old], dim=1)
    log_probs = F.log_softmax(new_logits[:, :n_old], dim=1)
    return -(targets * log_probs).sum(dim=1).mean()


def base_loss(classification, distill, gamma=1.0):
    """``L_base = L_c + γ L_d``. Pass ``distill=None`` on the first domain."""
    if distill is None:
        return classification
    return classification + gamma * distill


def mine_triplets(features, labels):
    """Batch-hard triplet mining.

    For every anchor that has at least one positive and one negative in the batch, pick the
    farthest positive and the nearest negative under squared Euclidean distance. Ties go to
    the lowest batch index.

    Returns:
        :obj:`list` of :class:`TripletIndex`, one per valid anchor; empty if no anchor is valid.
    """
    with torch.no_grad():
        distances = pairwise_squared_distances(features, features)
        same = labels.unsqueeze(0) == labels.unsqueeze(1)
        not_self = ~torch.eye(len(labels), dtype=torch.bool, device=labels.device)
        positives = same & not_self
        negatives = ~same

        triplets = []
        for anchor in range(len(labels)):
            if not positives[anchor].any() or not negatives[anchor].any():
                continue
            positive_distances = torch.where(
                positives[anchor], distances[anchor], torch.full_like(distances[anchor], -float("inf"))
            )
            negative_distances = torch.where(
                negatives[anchor], distances[anchor], torch.full_like(distances[anchor], float("inf"))
            )
            positive = _first_index(positive_distances, positive_distances.max())
            negative = _first_index(negative_distances, negative_distances.min())
            triplets.append(TripletIndex(anchor, positive, negative))

    if not triplets:
        LOGGER.debug("No valid triplet anchor in a batch of %d samples", len(labels))
    return triplets


def _first_index(values, target):
    return int(torch.nonzero(values == target)[0, 0])


def plasticity_loss(features, triplets):
    """Softplus triplet objective over aggregated features ``F``.

    ``L_p = 1/N^b * sum_(a,p,n) ln(1 + exp(Δ(F_a, F_p) - Δ(F_a, F_n)))``

    The ``1/N^b`` prefactor is kept even when fewer triplets than samples were mined.
    An empty triplet list yields zero.
    """
    if not triplets:
        return features.new_zeros(())
    anchors, positives, negatives = (torch.tensor(column, device=features.device) for column in zip(*triplets))
    positive_distances = (features[anchors] - features[positives]).pow(2).sum(dim=1)
    negative_distances = (features[anchors] - features[negatives]).pow(2).sum(dim=1)
    return F.softplus(positive_distances - negative_distances).sum() / features.shape[0]


def stability_loss(vertices, reference):
    """Softplus penalty on vertex movement from the previous domain's ending state.

    ``L_s = 1/N^K * sum_i ln(1 + exp(Δ(V^K_i, V̂^K_i)))``; the minimum ``ln 2`` is reached
    without movement. Returns zero when there is no reference yet (first domain).
    """
    if reference is None:
        return vertices.new_zeros(())
    if vertices.shape != reference.shape:
        raise ConfigurationError(
            "Vertices of shape %s cannot be compared to reference %s" % (tuple(vertices.shape), tuple(reference.shape))
        )
    movement = (vertices - reference).pow(2).sum(dim=1)
    return F.softplus(movement).mean()


def total_loss(base, plasticity, stability, weights):
    """``L_total = L_base + λ_p L_p + λ_s L_s``."""
    return base + weights.plasticity * plasticity + weights.stability * stability
