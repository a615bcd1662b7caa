"""
Data
====

Domain datasets and domain streams. Synthetic domains are Gaussian identity clusters
seen through a per-domain shift (random rotation, offset and noise level). On-disk
datasets can be ingested from CSV files of precomputed vectors or from image folders.

CSV layout
----------

A dataset folder holds ``train.csv``, ``query.csv`` and ``gallery.csv``. Each file starts
with the header ``id,camera,v0,...,v{d-1}``; ``camera`` may be left empty.

Image layout
------------

A dataset folder holds ``train/``, ``query/`` and ``gallery/``; each contains one folder per
identity (its name is the raw identity label) with PNG or JPEG files. Files named
``c{camera}_*`` carry a camera id.

.. autoclass:: DomainDataset
   :members:
.. autoclass:: SyntheticSpec
   :members:
.. autoclass:: DomainStream
   :members:
.. autofunction:: generate_domain
.. autofunction:: build_stream
.. autofunction:: ingest_directory
.. autofunction:: export_csv

"""
from __future__ import print_function

import csv
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import ConfigurationError, DatasetParseError, ProtocolError

__all__ = [
    "DomainDataset",
    "DomainStream",
    "SyntheticSpec",
    "build_stream",
    "export_csv",
    "generate_domain",
    "ingest_directory",
    "named_order",
]

LOGGER = logging.getLogger("lreidpy")

SPLITS = ("train", "query", "gallery")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
CAMERA_PATTERN = re.compile(r"^c(\d+)_")

# Order-2 visits the third and fourth domain first, then the first two, then the last
NAMED_ORDERS = {
    "order-1": (0, 1, 2, 3, 4),
    "order-2": (2, 3, 0, 1, 4),
}


class DomainDataset(object):
    """Train, query and gallery splits of one domain.

    The training split is instrumented: every read through :attr:`train` is counted, and
    :meth:`release` drops it so that a finished domain step can never read it again.

    Args:
        name (:obj:`str`): Domain name.
        train (:obj:`tuple`): ``(inputs, labels)`` of the training split.
        query (:obj:`tuple`): ``(inputs, labels, cameras)``; ``cameras`` may be ``None``.
        gallery (:obj:`tuple`): ``(inputs, labels, cameras)``; ``cameras`` may be ``None``.
    """

    def __init__(self, name, train, query, gallery):
        self.name = name
        self._train = _as_split(train, with_cameras=False)
        self.query = _as_split(query, with_cameras=True)
        self.gallery = _as_split(gallery, with_cameras=True)
        self.train_reads = 0
        self._released = False
        self.validate()

    @property
    def train(self):
        """``(inputs, labels)`` of the training split."""
        if self._released:
            raise ProtocolError("Training data of domain %s was released and cannot be read again" % self.name)
        self.train_reads += 1
        return self._train

    @property
    def is_released(self):
        return self._released

    def release(self):
        """Drop the training split; the test splits stay available."""
        self._train = None
        self._released = True

    @property
    def input_shape(self):
        for split in (self._train, self.query, self.gallery):
            if split is not None and len(split[0]):
                return tuple(split[0].shape[1:])
        raise ConfigurationError("Domain %s holds no samples" % self.name)

    @property
    def train_identities(self):
        if self._train is None:
            return []
        return sorted(set(self._train[1].tolist()))

    @property
    def test_identities(self):
        return sorted(set(self.query[1].tolist()) | set(self.gallery[1].tolist()))

    @property
    def num_identities(self):
        """Number of training identities ``|Y|``."""
        return len(self.train_identities)

    @property
    def num_train_samples(self):
        return 0 if self._train is None else len(self._train[1])

    @property
    def has_cameras(self):
        return self.query[2] is not None and self.gallery[2] is not None

    def samples_per_identity(self):
        """Mapping of training identity to its sample count."""
        if self._train is None:
            return {}
        identities, counts = np.unique(self._train[1].numpy(), return_counts=True)
        return dict(zip(identities.tolist(), counts.tolist()))

    def validate(self):
        overlap = set(self.train_identities) & set(self.test_identities)
        if overlap:
            raise ConfigurationError(
                "Domain %s shares identities between train and test: %s" % (self.name, sorted(overlap)[:5])
            )

    def relabel(self, mapping):
        """Return a copy whose labels are mapped through ``mapping`` (dict raw -> global)."""

        def remap(labels):
            return torch.tensor([mapping[int(y)] for y in labels.tolist()], dtype=torch.long)

        train = None if self._train is None else (self._train[0], remap(self._train[1]))
        query = (self.query[0], remap(self.query[1]), self.query[2])
        gallery = (self.gallery[0], remap(self.gallery[1]), self.gallery[2])
        return DomainDataset(self.name, train, query, gallery)

    def __repr__(self):
        return "DomainDataset(name=%r, identities=%d, train=%d, query=%d, gallery=%d)" % (
            self.name,
            self.num_identities,
            self.num_train_samples,
            len(self.query[1]),
            len(self.gallery[1]),
        )


def _as_split(split, with_cameras):
    if split is None:
        return None
    inputs = torch.as_tensor(split[0], dtype=torch.float32)
    labels = torch.as_tensor(split[1], dtype=torch.long)
    if len(inputs) != len(labels):
        raise ConfigurationError("Split has %d samples but %d labels" % (len(inputs), len(labels)))
    if not with_cameras:
        return inputs, labels
    cameras = split[2] if len(split) > 2 else None
    if cameras is not None:
        cameras = torch.as_tensor(cameras, dtype=torch.long)
    return inputs, labels, cameras


@dataclass
class SyntheticSpec(object):
    """Generator settings for synthetic domains.

    Attributes:
        identities (:obj:`int`): Training identities per domain.
        test_identities (:obj:`int`): Test identities per domain (disjoint from training ones).
        samples_per_identity (:obj:`tuple`): Inclusive ``(min, max)`` sample count per identity.
        input_dim (:obj:`int`): Dimension of the raw input vectors.
        separation (:obj:`float`): Standard deviation of identity cluster centers.
        noise (:obj:`float`): Base within-identity noise level.
        noise_spread (:obj:`float`): Relative per-domain variation of the noise level.
        rotation (:obj:`bool`): Apply a random orthogonal transform per domain.
        translation (:obj:`float`): Scale of the random per-domain offset.
        seed (:obj:`int`): Random seed.
    """

    identities: int = 20
    test_identities: int = 10
    samples_per_identity: tuple = (12, 12)
    input_dim: int = 32
    separation: float = 3.0
    noise: float = 1.0
    noise_spread: float = 0.5
    rotation: bool = True
    translation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.samples_per_identity = tuple(int(n) for n in self.samples_per_identity)
        low, high = self.samples_per_identity
        if self.identities < 1:
            raise ValueError("A synthetic domain needs at least one training identity")
        if self.test_identities < 1:
            raise ValueError("A synthetic domain needs at least one test identity")
        if low < 2 or high < low:
            raise ValueError("Samples per identity must satisfy 2 <= min <= max, got %s" % (self.samples_per_identity,))
        if not self.separation > 0:
            raise ValueError("Identity separation must be positive")
        if self.noise < 0 or self.noise_spread < 0 or self.translation < 0:
            raise ValueError("Noise and translation scales must be non-negative")
        if self.input_dim < 1:
            raise ValueError("Input dimension must be positive")


def _domain_shift(spec, rng):
    if spec.rotation:
        q, r = np.linalg.qr(rng.standard_normal((spec.input_dim, spec.input_dim)))
        rotation = q * np.sign(np.diag(r))
    else:
        rotation = np.eye(spec.input_dim)
    offset = rng.standard_normal(spec.input_dim) * spec.translation
    noise = spec.noise * (1.0 + spec.noise_spread * rng.uniform())
    return rotation, offset, noise


def generate_domain(spec, domain_index):
    """Generate one synthetic domain.

    Identity cluster centers come from a bank shared by all domains; the domain index
    only selects the shift (rotation, offset, noise level) and the sampling noise, so
    the result is a pure function of ``(spec, domain_index)``. Labels are local:
    training identities use ``0..I-1``, test identities ``I..I+T-1``.

    Returns:
        :class:`DomainDataset`
    """
    if spec.identities < 1 or spec.test_identities < 1:
        raise ValueError("A synthetic domain needs identities")
    if domain_index < 0:
        raise ValueError("Domain index must be non-negative")

    bank_rng = np.random.default_rng([spec.seed, 0])
    num_identities = spec.identities + spec.test_identities
    centers = bank_rng.standard_normal((num_identities, spec.input_dim)) * spec.separation

    rng = np.random.default_rng([spec.seed, 1, domain_index])
    rotation, offset, noise = _domain_shift(spec, rng)
    low, high = spec.samples_per_identity

    def draw(identity, count):
        latent = centers[identity] + noise * rng.standard_normal((count, spec.input_dim))
        return latent.dot(rotation.T) + offset

    train_x, train_y = [], []
    for identity in range(spec.identities):
        count = int(rng.integers(low, high + 1))
        train_x.append(draw(identity, count))
        train_y += [identity] * count

    query_x, query_y, gallery_x, gallery_y = [], [], [], []
    for identity in range(spec.identities, num_identities):
        samples = draw(identity, int(rng.integers(low, high + 1)))
        query_x.append(samples[:1])
        query_y.append(identity)
        gallery_x.append(samples[1:])
        gallery_y += [identity] * (len(samples) - 1)

    return DomainDataset(
        "synthetic-%d" % domain_index,
        (np.concatenate(train_x).astype(np.float32), np.array(train_y)),
        (np.concatenate(query_x).astype(np.float32), np.array(query_y), None),
        (np.concatenate(gallery_x).astype(np.float32), np.array(gallery_y), None),
    )


@dataclass
class DomainStream(object):
    """Ordered training domains.

    Attributes:
        domains (:obj:`list`): :class:`DomainDataset` objects in training order.
        order (:obj:`str`): Label of the order, e.g. ``order-1``.
        class_counts (:obj:`list`): Training identity count ``|Y^(t)|`` per step.
    """

    domains: list
    order: str = "order-1"
    class_counts: list = field(default_factory=list)

    def __len__(self):
        return len(self.domains)

    def __iter__(self):
        return iter(self.domains)

    @property
    def names(self):
        return [domain.name for domain in self.domains]


def named_order(order, num_domains):
    """Resolve an order given as a name (``order-1``/``order-2``), a comma list or a sequence."""
    if order is None:
        return tuple(range(num_domains)), "order-1"
    if isinstance(order, str):
        key = order.lower()
        if key == "order-1":
            return tuple(range(num_domains)), key
        if key in NAMED_ORDERS:
            if num_domains != len(NAMED_ORDERS[key]):
                raise ConfigurationError("Order %s is only defined for %d domains" % (order, len(NAMED_ORDERS[key])))
            return NAMED_ORDERS[key], key
        try:
            order = [int(i) for i in order.split(",")]
        except ValueError:
            raise ConfigurationError("Unknown domain order %r" % order)
    indices = tuple(int(i) for i in order)
    if sorted(indices) != list(range(num_domains)):
        raise ConfigurationError("Order %s is not a permutation of %d domains" % (indices, num_domains))
    return indices, ",".join(str(i) for i in indices)


def build_stream(domains, order=None, unseen=()):
    """Assemble a domain stream and the merged unseen test pool.

    Training labels are made globally unique and contiguous in arrival order, so that the
    classifier head of step ``t`` covers exactly the identities of ``D^(t)``. Test labels
    of every domain (and of the unseen pool) are mapped after all training labels. Raw
    label overlaps between domains are relabeled, never rejected.

    Args:
        domains (:obj:`list`): Training domains.
        order: Order name, comma separated indices or a sequence of indices.
        unseen (:obj:`list`): Held-out domains merged into the unseen pool.

    Returns:
        :obj:`tuple`: ``(DomainStream, DomainDataset or None)``.
    """
    domains = list(domains)
    if not domains:
        raise ValueError("A stream needs at least one domain")

    indices, label = named_order(order, len(domains))
    ordered = [domains[i] for i in indices]

    next_label = 0
    train_maps = []
    for domain in ordered:
        mapping = {}
        for raw in domain.train_identities:
            mapping[raw] = next_label
            next_label += 1
        train_maps.append(mapping)

    relabeled = []
    class_counts = []
    for domain, mapping in zip(ordered, train_maps):
        for raw in domain.test_identities:
            mapping[raw] = next_label
            next_label += 1
        relabeled.append(domain.relabel(mapping))
        class_counts.append(domain.num_identities)

    pool = None
    if unseen:
        queries, galleries = [], []
        for domain in unseen:
            mapping = {}
            for raw in domain.test_identities:
                mapping[raw] = next_label
                next_label += 1
            # held-out domains contribute test splits only
            moved = DomainDataset(domain.name, None, domain.query, domain.gallery).relabel(mapping)
            queries.append(moved.query)
            galleries.append(moved.gallery)
        pool = DomainDataset("unseen", None, _merge(queries), _merge(galleries))

    LOGGER.info("Built stream %s over %d domains with %d classes", label, len(relabeled), sum(class_counts))
    return DomainStream(relabeled, label, class_counts), pool


def _merge(splits):
    inputs = torch.cat([s[0] for s in splits])
    labels = torch.cat([s[1] for s in splits])
    if all(s[2] is not None for s in splits):
        cameras = torch.cat([s[2] for s in splits])
    else:
        cameras = None
    return inputs, labels, cameras


def _read_csv_split(path, expected_dim=None):
    inputs, labels, cameras = [], [], []
    with open(path, "r", newline="") as stream:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError("empty file, expected header id,camera,v0,...", path, 1)
        if len(header) < 3 or header[0].strip() != "id" or header[1].strip() != "camera":
            raise DatasetParseError("header must start with id,camera,v0", path, 1)
        dim = len(header) - 2
        if expected_dim is not None and dim != expected_dim:
            raise DatasetParseError("expected %d vector columns, got %d" % (expected_dim, dim), path, 1)

        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise DatasetParseError("expected %d columns, got %d" % (dim + 2, len(row)), path, line)
            try:
                labels.append(int(row[0]))
                cameras.append(int(row[1]) if row[1].strip() else None)
                inputs.append([float(value) for value in row[2:]])
            except ValueError as error:
                raise DatasetParseError(str(error), path, line, cause=error)

    if any(camera is None for camera in cameras):
        cameras = None
    return np.array(inputs, dtype=np.float32).reshape(-1, dim), np.array(labels, dtype=np.int64), cameras, dim


def _ingest_csv(path):
    splits = {}
    dim = None
    for split in SPLITS:
        filename = os.path.join(path, split + ".csv")
        if not os.path.isfile(filename):
            raise DatasetParseError("missing %s.csv" % split, path)
        inputs, labels, cameras, dim = _read_csv_split(filename, dim)
        splits[split] = (inputs, labels, cameras)
    return splits


def _read_image(filename, image_size):
    from matplotlib import image as mpimg

    try:
        pixels = np.asarray(mpimg.imread(filename), dtype=np.float32)
    except Exception as error:
        raise DatasetParseError("unreadable image: %s" % error, filename, cause=error)
    if pixels.max() > 1.0:
        pixels = pixels / 255.0
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    pixels = torch.from_numpy(np.ascontiguousarray(pixels[:, :, :3])).permute(2, 0, 1)
    if image_size is not None:
        pixels = torch.nn.functional.interpolate(
            pixels.unsqueeze(0), size=tuple(image_size), mode="bilinear", align_corners=False
        )[0]
    return pixels


def _ingest_images(path, image_size):
    splits = {}
    shape = None
    for split in SPLITS:
        root = os.path.join(path, split)
        if not os.path.isdir(root):
            raise DatasetParseError("missing %s/ folder" % split, path)
        inputs, labels, cameras = [], [], []
        for identity in sorted(os.listdir(root)):
            folder = os.path.join(root, identity)
            if not os.path.isdir(folder):
                continue
            try:
                raw_label = int(identity)
            except ValueError as error:
                raise DatasetParseError("identity folder names must be integers", folder, cause=error)
            files = sorted(f for f in os.listdir(folder) if f.lower().endswith(IMAGE_EXTENSIONS))
            if not files:
                LOGGER.warning("Skipping empty identity folder %s", folder)
                continue
            for filename in files:
                pixels = _read_image(os.path.join(folder, filename), image_size)
                if shape is None:
                    shape = tuple(pixels.shape)
                elif tuple(pixels.shape) != shape:
                    raise DatasetParseError(
                        "image shape %s differs from %s; set image_size" % (tuple(pixels.shape), shape),
                        os.path.join(folder, filename),
                    )
                match = CAMERA_PATTERN.match(filename)
                inputs.append(pixels)
                labels.append(raw_label)
                cameras.append(int(match.group(1)) if match else None)
        if any(camera is None for camera in cameras):
            cameras = None
        stacked = torch.stack(inputs) if inputs else torch.zeros((0,) + (shape or (3, 1, 1)))
        splits[split] = (stacked, np.array(labels, dtype=np.int64), cameras)
    return splits


def ingest_directory(path, layout="csv", name=None, image_size=None):
    """Load a dataset from disk.

    Args:
        path (:obj:`str`): Dataset folder.
        layout (:obj:`str`): ``csv`` for precomputed vectors, ``images`` for identity folders.
        name (:obj:`str`): Domain name, defaults to the folder name.
        image_size (:obj:`tuple`): ``(H, W)`` to resize images to; ``None`` keeps them as they are.

    Returns:
        :class:`DomainDataset`

    Raises:
        DatasetParseError: On malformed input, naming the file and line.
    """
    if not os.path.isdir(path):
        raise DatasetParseError("not a directory", path)
    if layout == "csv":
        splits = _ingest_csv(path)
    elif layout == "images":
        splits = _ingest_images(path, image_size)
    else:
        raise ConfigurationError("Unknown dataset layout %r, expected csv or images" % layout)

    train = splits["train"]
    if len(train[1]) == 0:
        raise DatasetParseError("training split holds no samples", path)
    dataset = DomainDataset(
        name or os.path.basename(os.path.normpath(path)), (train[0], train[1]), splits["query"], splits["gallery"]
    )
    LOGGER.info("Ingested %r", dataset)
    return dataset


def _write_csv_split(filename, inputs, labels, cameras):
    inputs = inputs.reshape(len(inputs), -1).numpy()
    with open(filename, "w", newline="") as stream:
        writer = csv.writer(stream)
        writer.writerow(["id", "camera"] + ["v%d" % i for i in range(inputs.shape[1])])
        for i, row in enumerate(inputs):
            camera = "" if cameras is None else int(cameras[i])
            writer.writerow([int(labels[i]), camera] + [repr(float(v)) for v in row])


def export_csv(dataset, path):
    """Write ``dataset`` in the CSV layout understood by :func:`ingest_directory`."""
    os.makedirs(path, exist_ok=True)
    inputs, labels = dataset.train
    _write_csv_split(os.path.join(path, "train.csv"), inputs, labels, None)
    _write_csv_split(os.path.join(path, "query.csv"), *dataset.query)
    _write_csv_split(os.path.join(path, "gallery.csv"), *dataset.gallery)
    return path
