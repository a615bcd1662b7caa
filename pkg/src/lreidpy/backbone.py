"""
Backbone
========

The backbone bundles the feature extractor :math:`h(\\cdot;\\theta)` and the
class-incremental classifier :math:`g(\\cdot;\\phi)`. Vector inputs go through a
small multilayer perceptron, image inputs through a tiny convolutional network.

.. autoclass:: Backbone
   :members:
.. autoclass:: IncrementalClassifier
   :members:
.. autoclass:: ModelSnapshot
   :members:
.. autofunction:: extract_features
.. autofunction:: classify
.. autofunction:: grow_classifier
.. autofunction:: snapshot

"""
from __future__ import print_function

import copy
import logging
from dataclasses import dataclass, replace

import torch
from torch import nn

from .core import ConfigurationError, FeatureBatch, check_finite

__all__ = [
    "Backbone",
    "IncrementalClassifier",
    "ModelSnapshot",
    "classify",
    "extract_features",
    "grow_classifier",
    "snapshot",
]

LOGGER = logging.getLogger("lreidpy")

DEFAULT_EMBEDDING_DIM = 64
NEW_HEAD_STD = 0.01


class Backbone(nn.Module):
    """Feature extractor mapping a batch of inputs to ``d``-dimensional embeddings.

    Args:
        input_shape (:obj:`tuple`): Shape of one sample, ``(D,)`` for vectors or ``(C, H, W)`` for images.
        embedding_dim (:obj:`int`): Embedding dimension ``d``.
        hidden_dims (:obj:`tuple`): Hidden layer widths of the vector network, or channel counts
            of the convolutional stages for images.
    """

    def __init__(self, input_shape, embedding_dim=DEFAULT_EMBEDDING_DIM, hidden_dims=(128, 128)):
        super(Backbone, self).__init__()
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) not in (1, 3):
            raise ConfigurationError("Input shape must be (D,) or (C, H, W), got %s" % (input_shape,))
        if embedding_dim < 1:
            raise ConfigurationError("Embedding dimension must be positive")

        self.input_shape = input_shape
        self.embedding_dim = int(embedding_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)

        layers = []
        if len(input_shape) == 1:
            width = input_shape[0]
            for hidden in self.hidden_dims:
                layers += [nn.Linear(width, hidden), nn.ReLU()]
                width = hidden
        else:
            channels = input_shape[0]
            for hidden in self.hidden_dims:
                layers += [
                    nn.Conv2d(channels, hidden, kernel_size=3, padding=1),
                    nn.ReLU(),
                    nn.MaxPool2d(2, ceil_mode=True),
                ]
                channels = hidden
            layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
            width = channels

        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width, self.embedding_dim)

    @property
    def is_image_backbone(self):
        return len(self.input_shape) == 3

    def forward(self, inputs):
        if tuple(inputs.shape[1:]) != self.input_shape:
            raise ConfigurationError(
                "Backbone expects samples of shape %s, got %s" % (self.input_shape, tuple(inputs.shape[1:]))
            )
        return self.head(self.body(inputs))


class IncrementalClassifier(nn.Module):
    """Linear classifier whose output width grows as domains arrive.

    Every domain owns one head; logits are the concatenation of all heads in arrival
    order. Old heads are never touched when new ones are appended, so the first ``C``
    logit columns computed after growth are bit-identical to the logits before growth.

    Args:
        embedding_dim (:obj:`int`): Input feature width ``d``.
    """

    def __init__(self, embedding_dim=DEFAULT_EMBEDDING_DIM):
        super(IncrementalClassifier, self).__init__()
        self.embedding_dim = int(embedding_dim)
        self.heads = nn.ModuleList()

    @property
    def num_classes(self):
        """Total class count ``C`` over all heads."""
        return sum(head.out_features for head in self.heads)

    @property
    def head_sizes(self):
        """Class count of every head, in domain arrival order."""
        return [head.out_features for head in self.heads]

    def grow(self, new_classes, generator=None):
        """Append a head with ``new_classes`` outputs.

        New weights are drawn from a normal distribution with std ``0.01``; biases start at zero.

        Args:
            new_classes (:obj:`int`): Number of classes to add, at least 1.
            generator (:obj:`torch.Generator`): Random source for the new weights.
        """
        if int(new_classes) != new_classes or new_classes < 1:
            raise ValueError("Number of new classes must be a positive integer, got %r" % (new_classes,))

        head = nn.Linear(self.embedding_dim, int(new_classes))
        with torch.no_grad():
            weight = torch.randn(head.weight.shape, generator=generator) * NEW_HEAD_STD
            head.weight.copy_(weight)
            head.bias.zero_()

        reference = next(self.parameters(), None)
        if reference is not None:
            head = head.to(dtype=reference.dtype, device=reference.device)
        self.heads.append(head)
        LOGGER.debug("Classifier grown by %d classes to %d", new_classes, self.num_classes)
        return self

    def forward(self, features):
        if self.num_classes < 1:
            raise ConfigurationError("Classifier has no classes yet; call grow() first")
        if features.shape[-1] != self.embedding_dim:
            raise ConfigurationError(
                "Classifier expects features of width %d, got %d" % (self.embedding_dim, features.shape[-1])
            )
        return torch.cat([head(features) for head in self.heads], dim=1)


@dataclass(frozen=True)
class ModelSnapshot(object):
    """Frozen copy of the model taken at a domain-step boundary.

    Attributes:
        backbone (:class:`Backbone`): Frozen feature extractor ``θ̂``.
        classifier (:class:`IncrementalClassifier`): Frozen classifier ``φ̂``.
        vertices (:obj:`torch.Tensor`): Frozen knowledge graph vertices ``V̂^K``, or ``None``.
        step (:obj:`int`): Domain step after which the snapshot was taken.
    """

    backbone: Backbone
    classifier: IncrementalClassifier
    vertices: torch.Tensor = None
    step: int = 0

    @property
    def num_classes(self):
        return self.classifier.num_classes

    def with_vertices(self, vertices):
        """Return a new snapshot that also holds a copy of ``vertices``."""
        frozen = vertices.detach().clone()
        frozen.requires_grad_(False)
        return replace(self, vertices=frozen)


def extract_features(backbone, inputs, labels=None):
    """Run the feature extractor on ``inputs``.

    Args:
        backbone (:class:`Backbone`): Feature extractor.
        inputs (:obj:`torch.Tensor`): Batch of samples.
        labels (:obj:`torch.Tensor`): Optional identity labels carried along.

    Returns:
        :class:`.FeatureBatch`: Embeddings of shape ``(N^b, d)``.
    """
    if inputs.shape[0] == 0:
        raise ValueError("Cannot extract features from an empty batch")
    features = backbone(inputs)
    check_finite(features, "extracted features")
    return FeatureBatch(features, labels)


def classify(classifier, features):
    """Compute logits of shape ``(N^b, C)`` for a :class:`.FeatureBatch` or a feature matrix."""
    if isinstance(features, FeatureBatch):
        features = features.features
    logits = classifier(features)
    return check_finite(logits, "logits")


def grow_classifier(classifier, new_classes, generator=None):
    """Grow ``classifier`` in place by ``new_classes`` outputs and return it."""
    return classifier.grow(new_classes, generator=generator)


def _freeze(module):
    frozen = copy.deepcopy(module)
    frozen.eval()
    for parameter in frozen.parameters():
        parameter.requires_grad_(False)
    return frozen


def snapshot(backbone, classifier, step=0, vertices=None):
    """Take a deep, frozen copy of the backbone and classifier.

    Later optimisation of the live modules never changes the snapshot.

    Returns:
        :class:`ModelSnapshot`
    """
    result = ModelSnapshot(_freeze(backbone), _freeze(classifier), None, int(step))
    if vertices is not None:
        result = result.with_vertices(vertices)
    return result


def state_checksum(module):
    """Sum of all parameter and buffer values in float64, used to detect mutation."""
    with torch.no_grad():
        return float(sum(t.double().sum() for t in module.state_dict().values()))


def logits_for_old_classes(snapshot_model, inputs):
    """Logits of the frozen snapshot for ``inputs`` (no gradient)."""
    with torch.no_grad():
        return snapshot_model.classifier(snapshot_model.backbone(inputs))
