"""

This library trains a person re-identification model on a *stream* of domains, one
domain at a time, without access to the training data of earlier domains. It provides
the baselines used for comparison (sequential fine-tuning, learning without forgetting
and similarity-preserving distillation) and the adaptive knowledge accumulation
learner, which keeps a learnable graph memory of knowledge vertices across domains.

Quick start
===========

Run a synthetic five domain stream from the command line::

    lreidpy run --config configs/synthetic.json --method aka --out runs/aka-0

Or from Python:

.. code-block:: python

    from lreidpy import ExperimentConfig, make_baseline

    config = ExperimentConfig()
    stream, unseen = config.stream.build()
    trainer = make_baseline("aka", config.train, stream.domains[0].input_shape)
    report = trainer.run_stream(stream, unseen)

Training
========

The :class:`Trainer` emits events while it learns (``step_start``, ``iteration``,
``epoch_end``, ``step_end``, ``evaluated``, ``finished`` and ``error``); recorders
listen to them to write ``losses.csv``, ``metrics.csv`` and graph diagnostics. See
:mod:`lreidpy.trainer` and :mod:`lreidpy.recorders`.

Errors
======

.. autoclass:: LReIDError
.. autoclass:: ConfigurationError
.. autoclass:: NumericalError
.. autoclass:: ProtocolError
.. autoclass:: EvaluationError
.. autoclass:: DatasetParseError

"""

from .__version__ import (
    __author__,
    __author_email__,
    __copyright__,
    __description__,
    __license__,
    __title__,
    __url__,
    __version__,
)
from .backbone import Backbone, IncrementalClassifier, ModelSnapshot
from .config import ExperimentConfig, StreamConfig
from .core import (
    ConfigurationError,
    DatasetParseError,
    EvaluationError,
    FeatureBatch,
    LReIDError,
    NumericalError,
    ProtocolError,
)
from .data import DomainDataset, DomainStream, SyntheticSpec, build_stream, generate_domain, ingest_directory
from .evaluation import MetricsReport, aggregate, evaluate_task
from .graph import KnowledgeGraph
from .losses import LossWeights
from .trainer import TrainConfig, Trainer, make_baseline

__all__ = [
    "__author__",
    "__author_email__",
    "__copyright__",
    "__description__",
    "__license__",
    "__title__",
    "__url__",
    "__version__",
    "Backbone",
    "ConfigurationError",
    "DatasetParseError",
    "DomainDataset",
    "DomainStream",
    "EvaluationError",
    "ExperimentConfig",
    "FeatureBatch",
    "IncrementalClassifier",
    "KnowledgeGraph",
    "LReIDError",
    "LossWeights",
    "MetricsReport",
    "ModelSnapshot",
    "NumericalError",
    "ProtocolError",
    "StreamConfig",
    "SyntheticSpec",
    "TrainConfig",
    "Trainer",
    "aggregate",
    "build_stream",
    "evaluate_task",
    "generate_domain",
    "ingest_directory",
    "make_baseline",
]
