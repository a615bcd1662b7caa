import os
from dataclasses import replace

import numpy as np
import pytest
import torch

from lreidpy import trainer as trainer_module
from lreidpy.backbone import state_checksum
from lreidpy.core import ConfigurationError, ProtocolError
from lreidpy.data import DomainDataset
from lreidpy.losses import LossWeights, mine_triplets, plasticity_loss, stability_loss
from lreidpy.trainer import PKSampler, TrainConfig, Trainer, make_baseline, read_checkpoint, sample_batch


def _split(labels, dim=3):
    labels = torch.tensor(labels)
    return torch.arange(len(labels) * dim, dtype=torch.float32).reshape(len(labels), dim), labels


def test_pk_batch_composition(tiny_spec):
    from lreidpy.data import generate_domain

    inputs, labels = sample_batch(generate_domain(tiny_spec, 0), 2, 2, np.random.default_rng(0))
    assert inputs.shape == (4, 8)
    values, counts = np.unique(labels.numpy(), return_counts=True)
    assert len(values) == 2
    assert counts.tolist() == [2, 2]


def test_small_identities_are_drawn_with_replacement():
    sampler = PKSampler(_split([0, 1, 1, 1, 1]), 2, 4, np.random.default_rng(0))
    inputs, labels = sampler.sample()
    single = inputs[labels == 0]
    assert len(single) == 4
    assert all(torch.equal(row, single[0]) for row in single)


def test_sampling_is_deterministic_per_seed():
    split = _split([0, 0, 1, 1, 2, 2, 3, 3])
    first = PKSampler(split, 2, 2, np.random.default_rng(5))
    second = PKSampler(split, 2, 2, np.random.default_rng(5))
    for _ in range(5):
        a, b = first.sample(), second.sample()
        assert torch.equal(a[0], b[0])
        assert torch.equal(a[1], b[1])


def test_sampler_needs_enough_identities():
    with pytest.raises(ValueError):
        PKSampler(_split([0, 0, 1]), 3, 2, np.random.default_rng(0))


def test_config_validation():
    assert TrainConfig().batch_size == 32
    assert TrainConfig(epochs=50).milestone_epochs() == [25, 35]
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(identities_per_batch=1, samples_per_identity=1)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"weights": {"beta": 1.0}})
    config = TrainConfig.from_dict({"weights": {"stability": 5e-4}, "hidden_dims": [4, 4]})
    assert config.weights == LossWeights(stability=5e-4)
    assert config.hidden_dims == (4, 4)


def test_classifier_width_follows_the_stream(make_stream, tiny_train_config):
    stream, _ = make_stream(domains=3, unseen=0)
    trainer = Trainer(tiny_train_config, (8,), "aka")
    for step, dataset in enumerate(stream.domains, start=1):
        trainer.train_domain(step, dataset)
        assert trainer.classifier.num_classes == 6 * step
        assert trainer.snapshot.num_classes == 6 * step
        assert trainer.snapshot.step == step
        assert trainer.snapshot.vertices.shape == (4, 8)


def test_first_step_skips_distillation_and_stability(make_stream, tiny_train_config):
    stream, _ = make_stream(domains=2, unseen=0)
    trainer = Trainer(tiny_train_config, (8,), "aka")
    first = trainer.train_domain(1, stream.domains[0])
    second = trainer.train_domain(2, stream.domains[1])

    assert all(record["L_d"] == 0.0 and record["L_s"] == 0.0 for record in first)
    assert all(record["L_p"] >= 0.0 for record in first)
    assert all(record["L_d"] > 0.0 for record in second)
    assert all(record["L_s"] >= np.log(2) - 1e-6 for record in second)
    assert len(first) == tiny_train_config.epochs * tiny_train_config.iterations_per_epoch


def test_steps_must_follow_the_protocol(make_stream, tiny_train_config):
    stream, _ = make_stream(domains=2, unseen=0)
    trainer = Trainer(tiny_train_config, (8,), "lwf")
    with pytest.raises(ProtocolError):
        trainer.train_domain(2, stream.domains[1])

    trainer.step = 1
    with pytest.raises(ProtocolError):
        trainer.train_domain(2, stream.domains[1])


def test_label_span_must_follow_previous_classes(tiny_spec, tiny_train_config):
    from lreidpy.data import generate_domain

    trainer = Trainer(tiny_train_config, (8,), "sft")
    domain = generate_domain(tiny_spec, 0).relabel({i: i + 3 for i in range(10)})
    with pytest.raises(ConfigurationError):
        trainer.train_domain(1, domain)


def test_graph_losses_never_reach_the_backbone(tiny_train_config):
    trainer = Trainer(tiny_train_config, (8,), "aka")
    trainer.classifier.grow(3)
    inputs, labels = torch.randn(6, 8), torch.tensor([0, 0, 1, 1, 2, 2])

    features = trainer.backbone(inputs)
    enhanced = trainer.graph(features.detach())
    graph_loss = plasticity_loss(enhanced.aggregated, mine_triplets(enhanced.aggregated, labels))
    graph_loss = graph_loss + 10.0 * stability_loss(trainer.graph.vertices, trainer.graph.snapshot_vertices() + 0.1)
    graph_loss.backward()

    assert all(p.grad is None for p in trainer.backbone.parameters())
    assert trainer.graph.vertices.grad.abs().sum() > 0


def test_attached_graph_input_does_reach_the_backbone(tiny_train_config):
    trainer = Trainer(tiny_train_config, (8,), "aka")
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    enhanced = trainer.graph(trainer.backbone(torch.randn(6, 8)))
    plasticity_loss(enhanced.aggregated, mine_triplets(enhanced.aggregated, labels)).backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in trainer.backbone.parameters())


def test_bypassed_graph_with_zero_weights_matches_lwf(make_stream, tiny_train_config):
    config = replace(
        tiny_train_config, epochs=5, iterations_per_epoch=10, weights=LossWeights(plasticity=0.0, stability=0.0)
    )
    histories = []
    for method, bypass in (("lwf", False), ("aka", True)):
        stream, _ = make_stream(domains=2, unseen=0)
        trainer = make_baseline(method, replace(config, bypass_graph=bypass), (8,))
        history = []
        for step, dataset in enumerate(stream.domains, start=1):
            history += trainer.train_domain(step, dataset)
        histories.append(history)
    assert len(histories[0]) == 100
    assert histories[0] == histories[1]


def test_sft_never_queries_the_snapshot(make_stream, tiny_train_config, monkeypatch):
    def fail(*args, **kwargs):
        raise AssertionError("snapshot logits requested")

    monkeypatch.setattr(trainer_module, "logits_for_old_classes", fail)
    stream, _ = make_stream(domains=2, unseen=0)
    trainer = make_baseline("SFT", tiny_train_config, (8,))
    for step, dataset in enumerate(stream.domains, start=1):
        history = trainer.train_domain(step, dataset)
    assert all(record["L_d"] == 0.0 for record in history)


def test_spd_distills_features(make_stream, tiny_train_config):
    stream, _ = make_stream(domains=2, unseen=0)
    trainer = make_baseline("spd", tiny_train_config, (8,))
    trainer.train_domain(1, stream.domains[0])
    history = trainer.train_domain(2, stream.domains[1])
    assert all(record["L_d"] >= 0.0 for record in history)
    assert trainer.graph is None


def test_unknown_variant_is_rejected(tiny_train_config):
    with pytest.raises(ValueError):
        make_baseline("ewc", tiny_train_config, (8,))


def test_run_stream_releases_data_and_evaluates_everything(make_stream, tiny_train_config, tmp_path):
    stream, pool = make_stream(domains=3, unseen=1)
    trainer = Trainer(tiny_train_config, (8,), "aka")
    events = []
    trainer.on("evaluated", lambda step, domain, split, metrics: events.append((step, domain, split)))

    report = trainer.run_stream(stream, pool, str(tmp_path))

    assert sorted(os.listdir(str(tmp_path))) == ["step_1.ckpt", "step_2.ckpt", "step_3.ckpt"]
    assert report.matrix().shape == (3, 4)
    assert report.unseen_domains == ["unseen"]
    assert len(events) == 12
    for dataset in stream.domains:
        assert dataset.is_released
        assert dataset.train_reads == 1
        with pytest.raises(ProtocolError):
            dataset.train


def test_single_domain_stream(make_stream, tiny_train_config):
    stream, _ = make_stream(domains=1, unseen=0)
    report = Trainer(tiny_train_config, (8,), "aka").run_stream(stream)
    assert report.steps == [1]
    assert report.seen_domains == stream.names


def test_runs_are_reproducible(make_stream, tiny_train_config):
    reports = []
    for _ in range(2):
        stream, pool = make_stream(domains=2, unseen=1)
        reports.append(list(Trainer(tiny_train_config, (8,), "aka").run_stream(stream, pool).rows()))
    assert reports[0] == reports[1]


def test_enhanced_evaluation_uses_the_graph(make_stream, tiny_train_config):
    assert TrainConfig().enhanced_eval
    stream, pool = make_stream(domains=1, unseen=1)
    trainer = Trainer(replace(tiny_train_config, eval_ranks=(1, 5)), (8,), "aka")
    report = trainer.run_stream(stream, pool)
    assert report.get(1, "unseen")["mAP"] > 0.0

    inputs = torch.randn(13, 8)
    trainer.backbone.eval()
    with torch.no_grad():
        plain = trainer.backbone(inputs)
        expected = trainer.graph.transfer_each(plain).aggregated
    encoded = trainer.encode(inputs)
    assert not torch.allclose(encoded, plain)
    assert torch.allclose(encoded, expected)
    assert torch.allclose(trainer.encode(inputs[:5]), encoded[:5], atol=1e-6)


def test_plain_evaluation_without_graph_or_when_disabled(tiny_train_config):
    inputs = torch.randn(6, 8)
    for method, config in (("lwf", tiny_train_config), ("aka", replace(tiny_train_config, enhanced_eval=False))):
        trainer = Trainer(config, (8,), method)
        trainer.backbone.eval()
        with torch.no_grad():
            assert torch.equal(trainer.encode(inputs), trainer.backbone(inputs))


def test_failed_evaluation_is_reported(make_stream, tiny_train_config, monkeypatch):
    from lreidpy.core import EvaluationError

    def broken(*args, **kwargs):
        raise EvaluationError("no valid query")

    monkeypatch.setattr(trainer_module, "evaluate_domains", broken)
    stream, _ = make_stream(domains=2, unseen=0)
    trainer = Trainer(tiny_train_config, (8,), "lwf")
    errors = []
    trainer.on("error", errors.append)
    with pytest.raises(EvaluationError):
        trainer.run_stream(stream)
    assert len(errors) == 1
    assert trainer.step == 1


def test_checkpoint_resume(make_stream, tiny_train_config, tmp_path):
    stream, pool = make_stream(domains=2, unseen=1)
    original = Trainer(tiny_train_config, (8,), "aka")
    original.run_stream(stream, pool, str(tmp_path))

    resumed = Trainer(tiny_train_config, (8,), "aka")
    metadata = resumed.load_checkpoint(str(tmp_path / "step_2.ckpt"))

    assert metadata["step"] == 2
    assert resumed.step == 2
    assert resumed.classifier.head_sizes == [6, 6]
    assert state_checksum(resumed.backbone) == state_checksum(original.backbone)
    assert state_checksum(resumed.graph) == state_checksum(original.graph)
    assert torch.equal(resumed.snapshot.vertices, original.snapshot.vertices)
    assert state_checksum(resumed.snapshot.classifier) == state_checksum(original.snapshot.classifier)

    with pytest.raises(ConfigurationError):
        Trainer(tiny_train_config, (8,), "lwf").load_checkpoint(str(tmp_path / "step_2.ckpt"))


def test_resumed_stream_skips_finished_steps(make_stream, tiny_train_config, tmp_path):
    stream, pool = make_stream(domains=2, unseen=0)
    Trainer(tiny_train_config, (8,), "lwf").run_stream(stream, pool, str(tmp_path))

    stream, pool = make_stream(domains=2, unseen=0)
    resumed = Trainer(tiny_train_config, (8,), "lwf")
    resumed.load_checkpoint(str(tmp_path / "step_1.ckpt"))
    report = resumed.run_stream(stream, pool)

    assert report.steps == [2]
    assert stream.domains[0].train_reads == 0
    assert stream.domains[1].train_reads == 1


def test_read_checkpoint_rejects_foreign_files(tmp_path):
    with pytest.raises(ConfigurationError):
        read_checkpoint(str(tmp_path / "missing.ckpt"))
    path = str(tmp_path / "other.ckpt")
    torch.save({"weights": torch.zeros(1)}, path)
    with pytest.raises(ConfigurationError):
        read_checkpoint(path)


def test_image_inputs_train(tiny_train_config):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 3)
    dataset = DomainDataset(
        "images",
        (rng.uniform(size=(12, 3, 6, 6)), labels),
        (rng.uniform(size=(2, 3, 6, 6)), np.array([4, 5]), None),
        (rng.uniform(size=(4, 3, 6, 6)), np.array([4, 4, 5, 5]), None),
    )
    config = replace(tiny_train_config, hidden_dims=(4,), identities_per_batch=2)
    history = Trainer(config, (3, 6, 6), "aka").train_domain(1, dataset)
    assert np.isfinite([record["L_total"] for record in history]).all()
