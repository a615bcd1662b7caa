import json

import pytest

from lreidpy.data import SyntheticSpec, build_stream, generate_domain
from lreidpy.losses import LossWeights
from lreidpy.trainer import TrainConfig


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(identities=6, test_identities=4, samples_per_identity=(4, 4), input_dim=8, seed=3)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        epochs=2,
        identities_per_batch=3,
        samples_per_identity=2,
        iterations_per_epoch=3,
        num_vertices=4,
        embedding_dim=8,
        hidden_dims=(16,),
        seed=3,
        weights=LossWeights(),
    )


@pytest.fixture
def make_stream(tiny_spec):
    def make(domains=3, unseen=1, order=None):
        train = [generate_domain(tiny_spec, i) for i in range(domains)]
        held_out = [generate_domain(tiny_spec, domains + i) for i in range(unseen)]
        return build_stream(train, order, held_out)

    return make


@pytest.fixture
def tiny_config_file(tmp_path):
    def write(name="config.json", **values):
        config = {
            "method": "aka",
            "seed": 1,
            "stream": {
                "domains": 2,
                "unseen_domains": 1,
                "synthetic": {"identities": 4, "test_identities": 3, "samples_per_identity": [3, 3], "input_dim": 6},
            },
            "train": {
                "epochs": 1,
                "identities_per_batch": 2,
                "samples_per_identity": 2,
                "iterations_per_epoch": 2,
                "num_vertices": 3,
                "embedding_dim": 4,
                "hidden_dims": [8],
            },
        }
        config.update(values)
        path = tmp_path / name
        path.write_text(json.dumps(config))
        return str(path)

    return write
