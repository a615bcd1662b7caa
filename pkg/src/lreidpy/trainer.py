"""
Trainer
=======

Sequential domain-incremental training. For every domain step the classifier grows by
the new identities, mini-batches of ``P`` identities with ``K`` samples each are drawn,
and the objective of the configured method is minimised with Adam. A frozen snapshot of
the model is taken at the end of each step and provides the distillation targets of the next one.

Four methods are available:

* ``sft``: sequential fine-tuning, cross-entropy only.
* ``lwf``: learning without forgetting, cross-entropy plus logit distillation.
* ``spd``: cross-entropy plus similarity-preserving feature distillation.
* ``aka``: LwF plus the graph memory trained with plasticity and stability losses.

The trainer emits the following events:

* ``step_start``: ``(step, dataset)`` before a domain step.
* ``iteration``: ``(record)`` with the loss components of one optimizer step.
* ``epoch_end``: ``(step, epoch, enhanced)`` with the last :class:`.EnhancedBatch` of the epoch.
* ``step_end``: ``(step, snapshot)`` after the snapshot was taken.
* ``evaluated``: ``(step, domain, split, metrics)`` for every test domain.
* ``finished``: ``(report)`` after the last step.
* ``error``: ``(exception)`` when a run aborts.

.. autoclass:: TrainConfig
   :members:
.. autoclass:: Trainer
   :members:
.. autoclass:: PKSampler
   :members:
.. autofunction:: sample_batch
.. autofunction:: make_baseline

"""
from __future__ import print_function

import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch.nn import functional as F

from . import backbone as backbone_module
from .backbone import Backbone, IncrementalClassifier, logits_for_old_classes
from .core import ConfigurationError, EvaluationError, LReIDError, ProtocolError, check_finite
from .evaluation import SEEN, UNSEEN, MetricsReport, aggregate, evaluate_domains
from .event_emitter import EventEmitterMixin
from .graph import KnowledgeGraph
from .losses import (
    LossWeights,
    base_loss,
    cross_entropy,
    distillation,
    mine_triplets,
    plasticity_loss,
    stability_loss,
    total_loss,
)

__all__ = [
    "METHODS",
    "PKSampler",
    "TrainConfig",
    "Trainer",
    "make_baseline",
    "read_checkpoint",
    "sample_batch",
]

LOGGER = logging.getLogger("lreidpy.trainer")

METHODS = ("sft", "lwf", "spd", "aka")
CHECKPOINT_FORMAT = 1
CHECKPOINT_NAME = "step_%d.ckpt"


@dataclass
class TrainConfig(object):
    """Optimisation settings shared by all methods.

    Attributes:
        epochs (:obj:`int`): Epochs per domain step.
        learning_rate (:obj:`float`): Adam learning rate.
        lr_milestones (:obj:`tuple`): Fractions of ``epochs`` after which the rate decays.
        lr_decay (:obj:`float`): Multiplicative decay applied at each milestone.
        identities_per_batch (:obj:`int`): ``P``.
        samples_per_identity (:obj:`int`): ``K``; identities with fewer samples are drawn with replacement.
        iterations_per_epoch (:obj:`int`): Optimizer steps per epoch; ``None`` covers the
            training split once per epoch.
        seed (:obj:`int`): Seed of every random source of the trainer.
        weights (:class:`.LossWeights`): ``γ``, ``λ_p`` and ``λ_s``.
        num_vertices (:obj:`int`): Knowledge graph size ``N^K``.
        embedding_dim (:obj:`int`): Embedding dimension ``d``.
        hidden_dims (:obj:`tuple`): Hidden widths (or channels) of the backbone.
        detach_graph_input (:obj:`bool`): Keep plasticity and stability gradients out of the backbone.
        bypass_graph (:obj:`bool`): Skip the graph memory entirely (ablation).
        enhanced_eval (:obj:`bool`): With the graph memory, evaluate on aggregated features ``F``
            (each sample transferred on its own) instead of ``V^S``.
        spd_weight (:obj:`float`): Weight of the similarity-preserving distillation.
        eval_workers (:obj:`int`): Test domains evaluated concurrently.
        eval_ranks (:obj:`tuple`): CMC ranks reported besides rank-1.
    """

    epochs: int = 10
    learning_rate: float = 3.5e-4
    lr_milestones: tuple = (0.5, 0.7)
    lr_decay: float = 0.1
    identities_per_batch: int = 8
    samples_per_identity: int = 4
    iterations_per_epoch: int = None
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    num_vertices: int = 16
    embedding_dim: int = 64
    hidden_dims: tuple = (128, 128)
    detach_graph_input: bool = True
    bypass_graph: bool = False
    enhanced_eval: bool = True
    spd_weight: float = 1000.0
    eval_workers: int = 1
    eval_ranks: tuple = (1,)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.eval_ranks = tuple(int(k) for k in self.eval_ranks)
        if self.epochs < 1:
            raise ConfigurationError("At least one epoch per domain is required")
        if self.identities_per_batch < 1 or self.samples_per_identity < 1:
            raise ConfigurationError("P and K must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("A batch needs at least 2 samples, got P*K=%d" % self.batch_size)
        if not self.learning_rate > 0:
            raise ConfigurationError("Learning rate must be positive")
        if any(not 0 < m <= 1 for m in self.lr_milestones):
            raise ConfigurationError("Learning rate milestones are fractions in (0, 1]")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ConfigurationError("Iterations per epoch must be positive")
        if self.num_vertices < 1 or self.embedding_dim < 1:
            raise ConfigurationError("N^K and d must be positive")
        if self.eval_workers < 1:
            raise ConfigurationError("At least one evaluation worker is required")

    @property
    def batch_size(self):
        """``N^b = P * K``."""
        return self.identities_per_batch * self.samples_per_identity

    def milestone_epochs(self):
        return sorted(set(max(1, int(round(m * self.epochs))) for m in self.lr_milestones))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = set(f.name for f in fields(cls))
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError("Unknown training settings: %s" % ", ".join(sorted(unknown)))
        values = dict(values)
        if "weights" in values and isinstance(values["weights"], dict):
            unknown = set(values["weights"]) - set(f.name for f in fields(LossWeights))
            if unknown:
                raise ConfigurationError("Unknown loss weights: %s" % ", ".join(sorted(unknown)))
        return cls(**values)


class PKSampler(object):
    """Draws batches of ``P`` identities with ``K`` samples each from a training split.

    Args:
        split (:obj:`tuple`): ``(inputs, labels)`` of a training split.
        identities_per_batch (:obj:`int`): ``P``.
        samples_per_identity (:obj:`int`): ``K``.
        rng (:obj:`numpy.random.Generator`): Random source.
    """

    def __init__(self, split, identities_per_batch, samples_per_identity, rng):
        self.inputs, self.labels = split
        self.identities_per_batch = identities_per_batch
        self.samples_per_identity = samples_per_identity
        self.rng = rng

        labels = self.labels.numpy()
        self.identities = np.unique(labels)
        if len(self.identities) < identities_per_batch:
            raise ValueError(
                "Cannot draw %d identities from a split with %d" % (identities_per_batch, len(self.identities))
            )
        self._index = {identity: np.flatnonzero(labels == identity) for identity in self.identities}

    def sample(self):
        """Return ``(inputs, labels)`` of exactly ``P * K`` samples."""
        chosen = self.rng.choice(self.identities, size=self.identities_per_batch, replace=False)
        picks = []
        for identity in chosen:
            candidates = self._index[identity]
            replace = len(candidates) < self.samples_per_identity
            picks.append(self.rng.choice(candidates, size=self.samples_per_identity, replace=replace))
        index = torch.from_numpy(np.concatenate(picks))
        return self.inputs[index], self.labels[index]


def sample_batch(dataset, identities_per_batch, samples_per_identity, rng):
    """Draw one ``P x K`` batch from the training split of ``dataset``."""
    return PKSampler(dataset.train, identities_per_batch, samples_per_identity, rng).sample()


def similarity_preserving_loss(features, old_features):
    """Similarity-preserving distillation between two embedding batches.

    Row-normalised batch Gram matrices of the live and the frozen model are compared with
    a squared Frobenius norm scaled by ``1 / N^b^2``.
    """
    current = F.normalize(features.matmul(features.transpose(0, 1)), dim=1)
    previous = F.normalize(old_features.matmul(old_features.transpose(0, 1)), dim=1)
    return (current - previous).pow(2).sum() / float(features.shape[0] ** 2)


class Trainer(EventEmitterMixin):
    """Domain-incremental trainer for one method.

    Args:
        config (:class:`TrainConfig`): Optimisation settings.
        input_shape (:obj:`tuple`): Shape of one input sample.
        method (:obj:`str`): One of ``sft``, ``lwf``, ``spd`` or ``aka``.
    """

    def __init__(self, config, input_shape, method="aka"):
        super(Trainer, self).__init__()
        if method not in METHODS:
            raise ValueError("Unknown method %r, expected one of %s" % (method, ", ".join(METHODS)))

        self.config = config
        self.method = method
        self.input_shape = tuple(int(s) for s in input_shape)
        self.step = 0
        self.snapshot = None
        self.report = MetricsReport()

        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.backbone = Backbone(self.input_shape, config.embedding_dim, config.hidden_dims)
        self.classifier = IncrementalClassifier(config.embedding_dim)
        self._head_generator = torch.Generator().manual_seed(config.seed + 1)

        self.graph = None
        if method == "aka":
            generator = torch.Generator().manual_seed(config.seed + 2)
            self.graph = KnowledgeGraph(config.num_vertices, config.embedding_dim, generator=generator)

    @property
    def uses_distillation(self):
        return self.method in ("lwf", "aka")

    @property
    def uses_graph(self):
        return self.graph is not None and not self.config.bypass_graph

    def _trainable_parameters(self):
        parameters = list(self.backbone.parameters()) + list(self.classifier.parameters())
        if self.uses_graph:
            parameters += list(self.graph.parameters())
        return parameters

    def train_domain(self, step, dataset):
        """Train domain step ``step`` on ``dataset``.

        Args:
            step (:obj:`int`): 1-based domain step; steps must be trained in order.
            dataset (:class:`.DomainDataset`): Domain whose training labels follow the
                classes of all previous steps.

        Returns:
            :obj:`list` of loss records, one per optimizer step.
        """
        if step != self.step + 1:
            raise ProtocolError("Expected domain step %d, got %d" % (self.step + 1, step))
        if step > 1 and self.snapshot is None:
            raise ProtocolError("Domain step %d needs the snapshot of step %d" % (step, step - 1))

        config = self.config
        split = dataset.train
        n_old = self.classifier.num_classes
        new_classes = dataset.num_identities
        labels = split[1]
        if int(labels.min()) != n_old or int(labels.max()) != n_old + new_classes - 1:
            raise ConfigurationError(
                "Domain %s labels span [%d, %d], expected [%d, %d]"
                % (dataset.name, labels.min(), labels.max(), n_old, n_old + new_classes - 1)
            )

        self.emit("step_start", step, dataset)
        LOGGER.info("Domain step %d (%s): %d new classes, %d samples", step, dataset.name, new_classes, len(labels))

        self.classifier.grow(new_classes, generator=self._head_generator)
        optimizer = torch.optim.Adam(self._trainable_parameters(), lr=config.learning_rate)
        scheduler = torch.optim.lr_scheduler.MultiStepLR(
            optimizer, milestones=config.milestone_epochs(), gamma=config.lr_decay
        )

        sampler = PKSampler(
            split, config.identities_per_batch, config.samples_per_identity, np.random.default_rng([config.seed, step])
        )
        iterations = config.iterations_per_epoch or max(1, len(labels) // config.batch_size)

        self.backbone.train()
        self.classifier.train()
        history = []
        for epoch in range(1, config.epochs + 1):
            enhanced = None
            for iteration in range(1, iterations + 1):
                inputs, batch_labels = sampler.sample()
                record, enhanced = self._optimize(optimizer, inputs, batch_labels, n_old)
                record.update(step=step, epoch=epoch, iteration=iteration)
                history.append(record)
                self.emit("iteration", record)
            scheduler.step()
            if enhanced is not None and self.has_listeners("epoch_end"):
                self.emit("epoch_end", step, epoch, enhanced)
            LOGGER.debug("Step %d epoch %d: L_total=%.4f", step, epoch, history[-1]["L_total"])

        vertices = self.graph.snapshot_vertices() if self.graph is not None else None
        self.snapshot = backbone_module.snapshot(self.backbone, self.classifier, step, vertices)
        self.step = step
        self.emit("step_end", step, self.snapshot)
        return history

    def _optimize(self, optimizer, inputs, labels, n_old):
        config = self.config
        features = self.backbone(inputs)
        check_finite(features, "extracted features")
        logits = self.classifier(features)

        classification = cross_entropy(logits, labels)
        distill = None
        if self.snapshot is not None and n_old > 0:
            if self.uses_distillation:
                old_logits = logits_for_old_classes(self.snapshot, inputs)
                distill = distillation(logits, old_logits, n_old)
            elif self.method == "spd":
                with torch.no_grad():
                    old_features = self.snapshot.backbone(inputs)
                distill = similarity_preserving_loss(features, old_features)
        gamma = config.spd_weight if self.method == "spd" else config.weights.distillation
        base = base_loss(classification, distill, gamma)

        zero = base.new_zeros(())
        plasticity, stability, enhanced = zero, zero, None
        if self.uses_graph:
            graph_input = features.detach() if config.detach_graph_input else features
            enhanced = self.graph(graph_input)
            triplets = mine_triplets(enhanced.aggregated, labels)
            plasticity = plasticity_loss(enhanced.aggregated, triplets)
            reference = self.snapshot.vertices if self.snapshot is not None else None
            stability = stability_loss(self.graph.vertices, reference)

        total = total_loss(base, plasticity, stability, config.weights)
        check_finite(total, "total loss")

        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        record = OrderedDict(
            L_c=float(classification),
            L_d=float(distill) if distill is not None else 0.0,
            L_p=float(plasticity),
            L_s=float(stability),
            L_total=float(total),
        )
        if enhanced is not None:
            enhanced.features = enhanced.features.detach()
            enhanced.propagated = enhanced.propagated.detach()
            enhanced.aggregated = enhanced.aggregated.detach()
            enhanced.cross = enhanced.cross.detach()
        return record, enhanced

    def encode(self, inputs):
        """Embed ``inputs`` with the current model in evaluation mode.

        With ``enhanced_eval`` and an active graph memory, the aggregated features ``F`` are
        returned. Every sample is transferred on its own, so an embedding never depends on
        the samples it is batched with.
        """
        with torch.no_grad():
            features = self.backbone(inputs)
            if not (self.config.enhanced_eval and self.uses_graph):
                return features
            return self.graph.transfer_each(features).aggregated

    def evaluate(self, step, stream, unseen=None):
        """Evaluate every test set of ``stream`` (and the unseen pool) after ``step``.

        Returns:
            :class:`.MetricsReport` holding all results so far.
        """
        datasets = list(stream.domains) + ([unseen] if unseen is not None else [])
        splits = [SEEN] * len(stream.domains) + [UNSEEN] * (unseen is not None)

        self.backbone.eval()
        if self.graph is not None:
            self.graph.eval()
        try:
            results = evaluate_domains(datasets, self.encode, self.config.eval_ranks, self.config.eval_workers)
        finally:
            self.backbone.train()
            if self.graph is not None:
                self.graph.train()

        for dataset, split, metrics in zip(datasets, splits, results):
            self.report.add(step, dataset.name, split, metrics)
            self.emit("evaluated", step, dataset.name, split, metrics)
            LOGGER.info(
                "Step %d %s %s: mAP=%.4f rank1=%.4f", step, split, dataset.name, metrics["mAP"], metrics["rank1"]
            )
        return self.report

    def run_stream(self, stream, unseen=None, output_dir=None):
        """Train every domain of ``stream`` in order, evaluating after each step.

        Training splits are released once their step is done. Steps already covered by a
        loaded checkpoint are skipped.

        Args:
            stream (:class:`.DomainStream`): Training domains.
            unseen (:class:`.DomainDataset`): Unseen test pool, optional.
            output_dir (:obj:`str`): Folder receiving ``step_{t}.ckpt`` files.

        Returns:
            :class:`.MetricsReport`
        """
        try:
            for step, dataset in enumerate(stream.domains, start=1):
                if step <= self.step:
                    dataset.release()
                    continue
                self.train_domain(step, dataset)
                dataset.release()
                if output_dir is not None:
                    self.save_checkpoint(os.path.join(output_dir, CHECKPOINT_NAME % step))
                try:
                    self.evaluate(step, stream, unseen)
                except LReIDError as error:
                    raise EvaluationError("Evaluation after step %d failed: %s" % (step, error), error)
        except Exception as error:
            LOGGER.error("Run aborted at step %d: %s", self.step, error)
            self.emit("error", error)
            raise

        if len(self.report):
            for split, values in aggregate(self.report).items():
                LOGGER.info("Final %s average: mAP=%.4f rank1=%.4f", split, values["mAP"], values["rank1"])
        self.emit("finished", self.report)
        return self.report

    def checkpoint_state(self):
        """Flat mapping of every tensor keyed by module path, plus metadata."""
        state = OrderedDict()
        for prefix, module in (("backbone", self.backbone), ("classifier", self.classifier), ("graph", self.graph)):
            if module is None:
                continue
            for key, tensor in module.state_dict().items():
                state["%s.%s" % (prefix, key)] = tensor.detach().clone()
        if self.snapshot is not None:
            frozen = (("snapshot.backbone", self.snapshot.backbone), ("snapshot.classifier", self.snapshot.classifier))
            for prefix, module in frozen:
                for key, tensor in module.state_dict().items():
                    state["%s.%s" % (prefix, key)] = tensor.detach().clone()
            if self.snapshot.vertices is not None:
                state["snapshot.vertices"] = self.snapshot.vertices.clone()

        metadata = OrderedDict(
            format=CHECKPOINT_FORMAT,
            step=self.step,
            num_classes=self.classifier.num_classes,
            head_sizes=self.classifier.head_sizes,
            embedding_dim=self.config.embedding_dim,
            seed=self.config.seed,
            method=self.method,
            input_shape=list(self.input_shape),
            config=_plain(self.config.to_dict()),
        )
        return OrderedDict(metadata=metadata, state=state)

    def save_checkpoint(self, path):
        """Write the model, graph memory and snapshot to ``path``."""
        folder = os.path.dirname(path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        torch.save(self.checkpoint_state(), path)
        LOGGER.info("Saved checkpoint %s", path)
        return path

    def load_checkpoint(self, path):
        """Restore a checkpoint written by :meth:`save_checkpoint` of the same method."""
        content = read_checkpoint(path)
        metadata, state = content["metadata"], content["state"]
        if metadata["method"] != self.method:
            raise ConfigurationError("Checkpoint was written by method %s, not %s" % (metadata["method"], self.method))
        if tuple(metadata["input_shape"]) != self.input_shape or metadata["embedding_dim"] != self.config.embedding_dim:
            raise ConfigurationError("Checkpoint does not match the configured backbone")

        self.classifier = IncrementalClassifier(self.config.embedding_dim)
        for size in metadata["head_sizes"]:
            self.classifier.grow(size, generator=self._head_generator)
        _load_prefixed(self.backbone, state, "backbone")
        _load_prefixed(self.classifier, state, "classifier")
        if self.graph is not None:
            _load_prefixed(self.graph, state, "graph")

        self.snapshot = None
        if "snapshot.backbone.head.weight" in state:
            with torch.random.fork_rng():
                old_backbone = Backbone(self.input_shape, self.config.embedding_dim, self.config.hidden_dims)
                old_classifier = IncrementalClassifier(self.config.embedding_dim)
                for size in metadata["head_sizes"]:
                    old_classifier.grow(size)
            _load_prefixed(old_backbone, state, "snapshot.backbone")
            _load_prefixed(old_classifier, state, "snapshot.classifier")
            self.snapshot = backbone_module.snapshot(
                old_backbone, old_classifier, metadata["step"], state.get("snapshot.vertices")
            )
        self.step = int(metadata["step"])
        LOGGER.info("Resumed from %s at step %d", path, self.step)
        return metadata


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _load_prefixed(module, state, prefix):
    marker = prefix + "."
    values = OrderedDict((key[len(marker) :], tensor) for key, tensor in state.items() if key.startswith(marker))
    module.load_state_dict(values)


def read_checkpoint(path):
    """Load the raw checkpoint container: ``{"metadata": {...}, "state": {path: tensor}}``."""
    if not os.path.isfile(path):
        raise ConfigurationError("Checkpoint %s does not exist" % path)
    content = torch.load(path, map_location="cpu")
    if not isinstance(content, dict) or content.get("metadata", {}).get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError("%s is not a checkpoint of this library" % path)
    return content


def make_baseline(variant, config, input_shape):
    """Create a trainer for one of the compared methods.

    Args:
        variant (:obj:`str`): ``sft``, ``lwf``, ``spd`` or ``aka`` (case insensitive).
        config (:class:`TrainConfig`): Optimisation settings.
        input_shape (:obj:`tuple`): Shape of one input sample.

    Returns:
        :class:`Trainer`
    """
    method = str(variant).lower()
    if method not in METHODS:
        raise ValueError("Unknown method %r, expected one of %s" % (variant, ", ".join(METHODS)))
    return Trainer(config, input_shape, method)
