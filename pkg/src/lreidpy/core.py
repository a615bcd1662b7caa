from __future__ import print_function

import logging
from dataclasses import dataclass

import torch

LOGGER = logging.getLogger("lreidpy")

__all__ = [
    "ConfigurationError",
    "DatasetParseError",
    "EvaluationError",
    "FeatureBatch",
    "LReIDError",
    "NumericalError",
    "ProtocolError",
    "check_finite",
]


class LReIDError(Exception):
    """Base exception of the library.

    Args:
        message (:obj:`str`): Human readable description.
        cause (:obj:`Exception`): Underlying exception, if any.
    """

    def __init__(self, message, cause=None):
        super(LReIDError, self).__init__(message)
        self.message = message
        self.cause = cause


class ConfigurationError(LReIDError, ValueError):
    """Raised on invalid configuration values or mismatching tensor widths."""

    pass


class NumericalError(LReIDError, ArithmeticError):
    """Raised when a tensor contains NaN or Inf values."""

    pass


class ProtocolError(LReIDError):
    """Raised when the domain-incremental protocol is violated."""

    pass


class EvaluationError(LReIDError):
    """Raised when a retrieval evaluation cannot produce a result."""

    pass


class DatasetParseError(LReIDError):
    """Raised on malformed dataset input.

    Args:
        message (:obj:`str`): Description of the problem.
        path (:obj:`str`): File or folder that failed to parse.
        line (:obj:`int`): 1-based line number inside ``path``, if applicable.
    """

    def __init__(self, message, path=None, line=None, cause=None):
        location = str(path) if path is not None else "<unknown>"
        if line is not None:
            location = "%s:%d" % (location, line)
        super(DatasetParseError, self).__init__("%s: %s" % (location, message), cause)
        self.path = path
        self.line = line


def check_finite(tensor, name):
    """Raise :class:`NumericalError` if ``tensor`` has non-finite entries.

    Returns:
        The unchanged tensor, to allow inline use.
    """
    if not bool(torch.isfinite(tensor).all()):
        raise NumericalError("Non-finite values found in %s" % name)
    return tensor


@dataclass
class FeatureBatch(object):
    """Embeddings ``V^S`` of one mini-batch together with their identity labels.

    Attributes:
        features (:obj:`torch.Tensor`): Matrix of shape ``(N^b, d)``.
        labels (:obj:`torch.Tensor`): Global identity indices, shape ``(N^b,)``. May be ``None``
            for unlabelled extraction.
    """

    features: torch.Tensor
    labels: torch.Tensor = None

    @property
    def size(self):
        """Number of samples ``N^b`` in the batch."""
        return self.features.shape[0]

    @property
    def dim(self):
        """Embedding dimension ``d``."""
        return self.features.shape[1]

    def detach(self):
        """Return a copy whose features do not propagate gradients."""
        return FeatureBatch(self.features.detach(), self.labels)
