"""
Configuration
=============

Experiments are described by a JSON document::

    {
        "method": "aka",
        "seed": 0,
        "output_dir": "runs/aka",
        "diagnostics": false,
        "stream": {
            "kind": "synthetic",
            "domains": 5,
            "unseen_domains": 2,
            "order": "order-1",
            "synthetic": {"identities": 20, "samples_per_identity": [12, 12]}
        },
        "train": {"epochs": 10, "weights": {"distillation": 1.0, "plasticity": 1.0, "stability": 10.0}}
    }

Every key is optional. Relative output folders are resolved against the
``LREIDPY_OUTPUT_ROOT`` environment variable when it is set.

.. autoclass:: ExperimentConfig
   :members:
.. autoclass:: StreamConfig
   :members:

"""
from __future__ import print_function

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

from .core import ConfigurationError
from .data import SyntheticSpec, build_stream, generate_domain, ingest_directory
from .trainer import METHODS, TrainConfig

__all__ = ["ExperimentConfig", "StreamConfig", "OUTPUT_ROOT_VARIABLE", "apply_override", "resolve_output_path"]

LOGGER = logging.getLogger("lreidpy")

OUTPUT_ROOT_VARIABLE = "LREIDPY_OUTPUT_ROOT"
STREAM_KINDS = ("synthetic", "directory")


def resolve_output_path(path):
    """Place a relative output ``path`` under ``LREIDPY_OUTPUT_ROOT`` when it is set."""
    root = os.environ.get(OUTPUT_ROOT_VARIABLE)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _check_keys(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigurationError("%s must be an object, got %r" % (where, values))
    unknown = set(values) - set(f.name for f in fields(cls))
    if unknown:
        raise ConfigurationError("Unknown keys in %s: %s" % (where, ", ".join(sorted(unknown))))


@dataclass
class StreamConfig(object):
    """Where the domains come from.

    Attributes:
        kind (:obj:`str`): ``synthetic`` or ``directory``.
        domains (:obj:`int`): Number of synthetic training domains.
        unseen_domains (:obj:`int`): Number of synthetic held-out domains.
        order: Training order: ``order-1``, ``order-2`` or a list of indices.
        synthetic (:class:`.SyntheticSpec`): Generator settings.
        paths (:obj:`list`): Training domain folders for ``directory`` streams.
        unseen_paths (:obj:`list`): Held-out domain folders for ``directory`` streams.
        layout (:obj:`str`): Folder layout, ``csv`` or ``images``.
        image_size (:obj:`list`): ``[H, W]`` to resize ingested images to.
    """

    kind: str = "synthetic"
    domains: int = 5
    unseen_domains: int = 2
    order: object = "order-1"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: list = field(default_factory=list)
    unseen_paths: list = field(default_factory=list)
    layout: str = "csv"
    image_size: list = None

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            _check_keys(SyntheticSpec, self.synthetic, "stream.synthetic")
            try:
                self.synthetic = SyntheticSpec(**self.synthetic)
            except ValueError as error:
                raise ConfigurationError(str(error), error)
        if self.kind not in STREAM_KINDS:
            raise ConfigurationError("Stream kind must be one of %s, got %r" % (", ".join(STREAM_KINDS), self.kind))
        if self.kind == "synthetic" and self.domains < 1:
            raise ConfigurationError("A synthetic stream needs at least one domain")
        if self.kind == "directory" and not self.paths:
            raise ConfigurationError("A directory stream needs at least one path")
        if self.unseen_domains < 0:
            raise ConfigurationError("The number of unseen domains cannot be negative")

    def build(self):
        """Create the domain stream and the unseen pool.

        Returns:
            :obj:`tuple`: ``(DomainStream, DomainDataset or None)``.
        """
        if self.kind == "synthetic":
            domains = [generate_domain(self.synthetic, index) for index in range(self.domains)]
            unseen = [generate_domain(self.synthetic, self.domains + index) for index in range(self.unseen_domains)]
        else:
            domains = [ingest_directory(path, self.layout, image_size=self.image_size) for path in self.paths]
            unseen = [ingest_directory(path, self.layout, image_size=self.image_size) for path in self.unseen_paths]
        return build_stream(domains, self.order, unseen)


@dataclass
class ExperimentConfig(object):
    """Complete description of one experiment.

    The top-level ``seed`` is propagated to the training and synthetic generator settings.

    Attributes:
        method (:obj:`str`): ``sft``, ``lwf``, ``spd`` or ``aka``.
        seed (:obj:`int`): Seed of the whole run.
        output_dir (:obj:`str`): Folder receiving all artifacts.
        diagnostics (:obj:`bool`): Dump graph memory diagnostics every epoch.
        resume_from (:obj:`str`): Checkpoint to resume the stream from.
        stream (:class:`StreamConfig`): Domain stream.
        train (:class:`.TrainConfig`): Optimisation settings.
    """

    method: str = "aka"
    seed: int = 0
    output_dir: str = "runs/default"
    diagnostics: bool = False
    resume_from: str = None
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.stream, dict):
            _check_keys(StreamConfig, self.stream, "stream")
            self.stream = StreamConfig(**self.stream)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.method = str(self.method).lower()
        if self.method not in METHODS:
            raise ConfigurationError("Unknown method %r, expected one of %s" % (self.method, ", ".join(METHODS)))
        self.train.seed = self.seed
        self.stream.synthetic.seed = self.seed

    @property
    def resolved_output_dir(self):
        """Output folder after applying ``LREIDPY_OUTPUT_ROOT``."""
        return resolve_output_path(self.output_dir)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Build a validated config, rejecting unknown keys."""
        _check_keys(cls, values, "config")
        try:
            return cls(**values)
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as error:
            raise ConfigurationError("Invalid configuration: %s" % error, error)

    @classmethod
    def load(cls, path, overrides=()):
        """Read a JSON config file and apply ``key.sub=value`` overrides.

        Raises:
            ConfigurationError: If the file is missing or invalid.
        """
        if not os.path.isfile(path):
            raise ConfigurationError("Config file %s does not exist" % path)
        with open(path, "r") as stream:
            try:
                values = json.load(stream)
            except ValueError as error:
                raise ConfigurationError("Config file %s is not valid JSON: %s" % (path, error), error)
        for override in overrides:
            apply_override(values, override)
        return cls.from_dict(values)

    def save(self, path):
        """Write the config as JSON."""
        with open(path, "w") as stream:
            json.dump(self.to_dict(), stream, indent=2, sort_keys=True)
        return path


def apply_override(values, override):
    """Apply a ``dotted.key=value`` override to a nested dict in place.

    ``value`` is decoded as JSON when possible and kept as a string otherwise.
    """
    if "=" not in override:
        raise ConfigurationError("Override %r must look like key=value" % override)
    key, raw = override.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw

    target = values
    parts = key.strip().split(".")
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigurationError("Cannot override %s: %s is not an object" % (key, part))
    target[parts[-1]] = value
    return values
