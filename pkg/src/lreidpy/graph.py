"""
Graph memory
============

The graph memory keeps an accumulated knowledge graph (AKG) of ``N^K`` learnable
vertices. For every mini-batch, an instance similarity graph (ISG) is built over the
batch embeddings, both graphs are linked into a joint graph through a
non-parameterized softmax similarity, and one graph convolution propagates the
accumulated knowledge into the batch features.

.. autoclass:: KnowledgeGraph
   :members:
.. autoclass:: SimilarityGraph
   :members:
.. autoclass:: JointGraph
   :members:
.. autoclass:: EnhancedBatch
   :members:
.. autofunction:: build_isg
.. autofunction:: akg_adjacency
.. autofunction:: cross_weights
.. autofunction:: assemble_joint
.. autofunction:: propagate
.. autofunction:: enhance
.. autofunction:: snapshot_vertices

"""
from __future__ import print_function

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .core import ConfigurationError, FeatureBatch, check_finite

__all__ = [
    "EnhancedBatch",
    "JointGraph",
    "KnowledgeGraph",
    "SimilarityGraph",
    "akg_adjacency",
    "assemble_joint",
    "build_isg",
    "cosine_similarity_matrix",
    "cross_weights",
    "enhance",
    "pairwise_squared_distances",
    "propagate",
    "snapshot_vertices",
]

LOGGER = logging.getLogger("lreidpy")

DEFAULT_NUM_VERTICES = 16
EDGE_WEIGHT_STD = 0.01
# W^J entries start with std GCN_WEIGHT_GAIN / d
GCN_WEIGHT_GAIN = 0.1


@dataclass
class SimilarityGraph(object):
    """Instance similarity graph over one mini-batch.

    Attributes:
        vertices (:obj:`torch.Tensor`): ``V^S``, shape ``(N^b, d)``.
        adjacency (:obj:`torch.Tensor`): ``A^S``, shape ``(N^b, N^b)``, entries in ``(0, 1)``. In
            float32 the sigmoid rounds to exactly 1 for scores above about 17.
    """

    vertices: torch.Tensor
    adjacency: torch.Tensor


@dataclass
class JointGraph(object):
    """Block graph linking the batch graph with the knowledge graph.

    Attributes:
        adjacency (:obj:`torch.Tensor`): ``A^J = [[A^S, A^C], [A^C^T, A^K]]``.
        vertices (:obj:`torch.Tensor`): ``V^J = [V^S; V^K]``.
        batch_size (:obj:`int`): ``N^b``, the number of leading batch vertices.
    """

    adjacency: torch.Tensor
    vertices: torch.Tensor
    batch_size: int

    @property
    def num_vertices(self):
        """Number of knowledge vertices ``N^K``."""
        return self.vertices.shape[0] - self.batch_size

    def blocks(self):
        """Split the adjacency back into ``(A^S, A^C, A^K)``."""
        n = self.batch_size
        return self.adjacency[:n, :n], self.adjacency[:n, n:], self.adjacency[n:, n:]


@dataclass
class EnhancedBatch(object):
    """Batch features after knowledge transfer.

    Attributes:
        features (:obj:`torch.Tensor`): Input embeddings ``V^S``.
        propagated (:obj:`torch.Tensor`): ``V̄^S``, the top ``N^b`` rows of the propagated graph.
        aggregated (:obj:`torch.Tensor`): ``F = (V^S + V̄^S) / 2``.
        cross (:obj:`torch.Tensor`): Cross-graph weights ``A^C`` used for the transfer, if known.
    """

    features: torch.Tensor
    propagated: torch.Tensor
    aggregated: torch.Tensor
    cross: torch.Tensor = None


def pairwise_squared_distances(x, y):
    """Squared Euclidean distances between the rows of ``x`` and ``y``.

    Computed from explicit differences, which keeps gradients exact at zero distance.
    """
    return (x.unsqueeze(1) - y.unsqueeze(0)).pow(2).sum(dim=-1)


def _learnable_l1_adjacency(vertices, weight, bias, name):
    check_finite(vertices, name + " vertices")
    check_finite(weight, name + " weight")
    check_finite(bias, name + " bias")
    if weight.numel() != vertices.shape[1]:
        raise ConfigurationError(
            "%s weight has %d entries, vertices have width %d" % (name, weight.numel(), vertices.shape[1])
        )

    distances = (vertices.unsqueeze(1) - vertices.unsqueeze(0)).abs()
    scores = distances.matmul(weight.reshape(-1)) + bias.reshape(())
    # mirror the upper triangle so that A == A^T holds bit for bit
    scores = torch.triu(scores) + torch.triu(scores, diagonal=1).transpose(0, 1)
    return torch.sigmoid(scores)


def build_isg(features, weight, bias):
    """Build the instance similarity graph of a batch.

    ``A^S_ij = sigmoid(W^S |V^S_i - V^S_j| + b^S)``

    Args:
        features (:obj:`torch.Tensor` or :class:`.FeatureBatch`): ``V^S`` of shape ``(N^b, d)``.
        weight (:obj:`torch.Tensor`): ``W^S`` of shape ``(1, d)``.
        bias (:obj:`torch.Tensor`): Scalar ``b^S``.

    Returns:
        :class:`SimilarityGraph`
    """
    if isinstance(features, FeatureBatch):
        features = features.features
    if features.dim() != 2 or features.shape[0] < 2:
        raise ValueError("A similarity graph needs at least 2 samples, got shape %s" % (tuple(features.shape),))
    return SimilarityGraph(features, _learnable_l1_adjacency(features, weight, bias, "ISG"))


def akg_adjacency(vertices, weight, bias):
    """Adjacency of the accumulated knowledge graph.

    ``A^K_ij = sigmoid(W^K |V^K_i - V^K_j| + b^K)``
    """
    if vertices.dim() != 2 or vertices.shape[0] < 1:
        raise ValueError("The knowledge graph needs at least one vertex")
    return _learnable_l1_adjacency(vertices, weight, bias, "AKG")


def cross_weights(features, vertices):
    """Non-parameterized cross-graph weights.

    ``A^C_ij = softmax_j(-||V^S_i - V^K_j||^2 / 2)``; every row sums to one.

    Returns:
        :obj:`torch.Tensor`: Matrix of shape ``(N^b, N^K)``.
    """
    if features.shape[1] != vertices.shape[1]:
        raise ConfigurationError(
            "Features of width %d cannot be linked to vertices of width %d" % (features.shape[1], vertices.shape[1])
        )
    if vertices.shape[0] < 1:
        raise ValueError("The knowledge graph needs at least one vertex")
    check_finite(features, "features")
    check_finite(vertices, "knowledge vertices")
    return F.softmax(-0.5 * pairwise_squared_distances(features, vertices), dim=1)


def assemble_joint(isg, akg_adj, cross, vertices):
    """Assemble the joint graph ``[[A^S, A^C], [A^C^T, A^K]]`` with vertices ``[V^S; V^K]``.

    Returns:
        :class:`JointGraph`
    """
    n_batch, dim = isg.vertices.shape
    n_vertices = vertices.shape[0]

    if isg.adjacency.shape != (n_batch, n_batch):
        raise ValueError("A^S has shape %s, expected %s" % (tuple(isg.adjacency.shape), (n_batch, n_batch)))
    if akg_adj.shape != (n_vertices, n_vertices):
        raise ValueError("A^K has shape %s, expected %s" % (tuple(akg_adj.shape), (n_vertices, n_vertices)))
    if cross.shape != (n_batch, n_vertices):
        raise ValueError("A^C has shape %s, expected %s" % (tuple(cross.shape), (n_batch, n_vertices)))
    if vertices.shape[1] != dim:
        raise ValueError("V^K has width %d, expected %d" % (vertices.shape[1], dim))

    top = torch.cat([isg.adjacency, cross], dim=1)
    bottom = torch.cat([cross.transpose(0, 1), akg_adj], dim=1)
    adjacency = torch.cat([top, bottom], dim=0)
    return JointGraph(adjacency, torch.cat([isg.vertices, vertices], dim=0), n_batch)


def propagate(joint, weight):
    """One graph convolution over the joint graph: ``V^G = ReLU(A^J (V^J W^J))``.

    No degree normalization is applied to ``A^J``.

    Returns:
        :obj:`torch.Tensor`: ``V^G`` with shape ``(N^b + N^K, d)``.
    """
    dim = joint.vertices.shape[1]
    if tuple(weight.shape) != (dim, dim):
        raise ValueError("GCN weight must have shape %s, got %s" % ((dim, dim), tuple(weight.shape)))
    messages = check_finite(joint.vertices.matmul(weight), "GCN messages")
    return check_finite(F.relu(joint.adjacency.matmul(messages)), "propagated vertices")


def enhance(features, propagated):
    """Aggregate batch features with their propagated knowledge: ``F = (V^S + V̄^S) / 2``.

    Returns:
        :class:`EnhancedBatch`
    """
    if features.shape != propagated.shape:
        raise ValueError("Cannot aggregate shapes %s and %s" % (tuple(features.shape), tuple(propagated.shape)))
    return EnhancedBatch(features, propagated, (features + propagated) / 2)


def snapshot_vertices(graph):
    """Immutable copy ``V̂^K`` of the current knowledge vertices of ``graph``."""
    return graph.snapshot_vertices()


def cosine_similarity_matrix(x, y):
    """Cosine similarity between every row of ``x`` and every row of ``y``, values in ``[-1, 1]``."""
    x = F.normalize(x, dim=1)
    y = F.normalize(y, dim=1)
    return x.matmul(y.transpose(0, 1)).clamp(-1.0, 1.0)


class KnowledgeGraph(nn.Module):
    """Learnable accumulated knowledge graph ``ψ`` and the transfer operation built on it.

    Args:
        num_vertices (:obj:`int`): Number of knowledge vertices ``N^K``. Fixed for the whole stream.
        embedding_dim (:obj:`int`): Vertex width ``d``; must match the backbone.
        generator (:obj:`torch.Generator`): Random source for initialization. Using a dedicated
            generator keeps the backbone initialization independent of the graph memory.
    """

    def __init__(self, num_vertices=DEFAULT_NUM_VERTICES, embedding_dim=64, generator=None):
        super(KnowledgeGraph, self).__init__()
        if num_vertices < 1:
            raise ConfigurationError("The knowledge graph needs at least one vertex")
        if embedding_dim < 1:
            raise ConfigurationError("Embedding dimension must be positive")

        d = int(embedding_dim)
        self.vertices = nn.Parameter(torch.randn(int(num_vertices), d, generator=generator) / math.sqrt(d))
        self.isg_weight = nn.Parameter(torch.randn(1, d, generator=generator) * EDGE_WEIGHT_STD)
        self.isg_bias = nn.Parameter(torch.zeros(()))
        self.akg_weight = nn.Parameter(torch.randn(1, d, generator=generator) * EDGE_WEIGHT_STD)
        self.akg_bias = nn.Parameter(torch.zeros(()))

        self.gcn_weight = nn.Parameter(torch.randn(d, d, generator=generator) * (GCN_WEIGHT_GAIN / d))

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def embedding_dim(self):
        return self.vertices.shape[1]

    def joint_graph(self, features):
        """Build the joint graph of a batch against the current knowledge vertices."""
        if features.shape[1] != self.embedding_dim:
            raise ConfigurationError(
                "Knowledge graph has width %d, features have width %d" % (self.embedding_dim, features.shape[1])
            )
        isg = build_isg(features, self.isg_weight, self.isg_bias)
        akg = akg_adjacency(self.vertices, self.akg_weight, self.akg_bias)
        cross = cross_weights(features, self.vertices)
        return assemble_joint(isg, akg, cross, self.vertices)

    def forward(self, features):
        """Transfer accumulated knowledge into ``features``.

        Args:
            features (:obj:`torch.Tensor` or :class:`.FeatureBatch`): ``V^S``. Pass a detached tensor
                to keep plasticity and stability gradients away from the backbone.

        Returns:
            :class:`EnhancedBatch`
        """
        if isinstance(features, FeatureBatch):
            features = features.features
        joint = self.joint_graph(features)
        propagated = propagate(joint, self.gcn_weight)[: joint.batch_size]
        enhanced = enhance(features, propagated)
        enhanced.cross = joint.blocks()[1]
        return enhanced

    def transfer_each(self, features):
        """Transfer accumulated knowledge into every row of ``features`` on its own.

        Each sample forms a joint graph with the knowledge vertices only, so its instance
        graph is the single self-loop ``sigmoid(b^S)``:

        ``V̄^S_i = ReLU((sigmoid(b^S) V^S_i + A^C_i V^K) W^J)``

        The result for a sample does not depend on the other rows; retrieval embeddings
        use this form.

        Returns:
            :class:`EnhancedBatch`
        """
        if isinstance(features, FeatureBatch):
            features = features.features
        if features.dim() != 2 or features.shape[1] != self.embedding_dim:
            raise ConfigurationError(
                "Knowledge graph has width %d, features have shape %s" % (self.embedding_dim, tuple(features.shape))
            )
        cross = cross_weights(features, self.vertices)
        self_loop = torch.sigmoid(self.isg_bias.reshape(()))
        gathered = self_loop * features + cross.matmul(self.vertices)
        messages = check_finite(gathered.matmul(self.gcn_weight), "GCN messages")
        enhanced = enhance(features, F.relu(messages))
        enhanced.cross = cross
        return enhanced

    def snapshot_vertices(self):
        """Immutable copy of ``V^K`` for the stability objective of the next domain step."""
        frozen = self.vertices.detach().clone()
        frozen.requires_grad_(False)
        return frozen
